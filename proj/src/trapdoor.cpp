#include "trapnet/trapdoor.hpp"

#include "trapnet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace trapnet {

namespace {

constexpr int kPlacementRetries = 1000;

struct Square {
  Index row, col, side;
};

void require_image_shape(const Shape& s, const char* op) {
  if (s.size() != 3) throw ShapeError(std::string(op) + ": expected [C,H,W] sample shape, got " + to_string(s));
}

/// Occupancy over H x W positions (channels share placement).
struct Occupancy {
  Index h, w;
  std::vector<char> taken;
  Occupancy(Index h_, Index w_) : h(h_), w(w_), taken(std::size_t(h_ * w_), 0) {}
  bool free(const Square& sq) const {
    for (Index r = sq.row; r < sq.row + sq.side; ++r)
      for (Index c = sq.col; c < sq.col + sq.side; ++c)
        if (taken[std::size_t(r * w + c)]) return false;
    return true;
  }
  void mark(const Square& sq) {
    for (Index r = sq.row; r < sq.row + sq.side; ++r)
      for (Index c = sq.col; c < sq.col + sq.side; ++c) taken[std::size_t(r * w + c)] = 1;
  }
  void mark(const Tensor& mask) {
    const Index c = mask.dim(0);
    for (Index ch = 0; ch < c; ++ch)
      for (Index i = 0; i < h * w; ++i)
        if (mask[ch * h * w + i] != 0.f) taken[std::size_t(i)] = 1;
  }
};

Square place_square(Occupancy& occ, Index side, Rng& rng) {
  if (side > occ.h || side > occ.w)
    throw PreconditionError("trapdoor: square of side " + std::to_string(side) + " does not fit " +
                            std::to_string(occ.h) + "x" + std::to_string(occ.w));
  std::uniform_int_distribution<Index> rows(0, occ.h - side), cols(0, occ.w - side);
  for (int attempt = 0; attempt < kPlacementRetries; ++attempt) {
    Square sq{rows(rng), cols(rng), side};
    if (occ.free(sq)) {
      occ.mark(sq);
      return sq;
    }
  }
  throw PreconditionError("trapdoor: could not place a non-overlapping " + std::to_string(side) + "x" +
                          std::to_string(side) + " square after " + std::to_string(kPlacementRetries) + " attempts");
}

void paint(Trapdoor& t, const Square& sq, float kappa, const std::function<float()>& value) {
  const Index c = t.mask.dim(0), h = t.mask.dim(1), w = t.mask.dim(2);
  for (Index ch = 0; ch < c; ++ch)
    for (Index r = sq.row; r < sq.row + sq.side; ++r)
      for (Index col = sq.col; col < sq.col + sq.side; ++col) {
        const Index i = (ch * h + r) * w + col;
        t.mask[i] = kappa;
        t.pattern[i] = value();
      }
}

float draw_intensity(const IntensityParams& p, Rng& rng) {
  if (p.sigma <= 0.f) return std::clamp(p.mu, 0.f, 1.f);
  std::normal_distribution<double> dist(p.mu, p.sigma);
  return std::clamp(float(dist(rng)), 0.f, 1.f);
}

Trapdoor blank(const Shape& shape, float kappa, int target) {
  if (!(kappa > 0.f && kappa <= 1.f)) throw PreconditionError("trapdoor: kappa must lie in (0,1]");
  return Trapdoor{Tensor::zeros(shape), Tensor::zeros(shape), kappa, target};
}

Trapdoor multi_square_at(const Shape& shape, int target, Occupancy& occ, Rng& rng, const MultiSquareOptions& o) {
  if (o.n_squares < 1) throw PreconditionError("make_multi_square: need at least one square");
  Trapdoor t = blank(shape, o.kappa, target);
  for (Index k = 0; k < o.n_squares; ++k) {
    const Square sq = place_square(occ, o.square, rng);
    const float v = draw_intensity(o.intensity, rng);
    paint(t, sq, o.kappa, [v] { return v; });
  }
  return t;
}

void fill_uniform_noise(Trapdoor& t, const Square& sq, Rng& rng) {
  std::uniform_real_distribution<float> u(0.f, 1.f);
  paint(t, sq, t.kappa, [&] { return u(rng); });
}

const IntensityParams kUniformNoiseMoments{0.5f, 0.28867513f};

}  // namespace

void Trapdoor::validate() const {
  if (mask.shape() != pattern.shape())
    throw ShapeError("trapdoor: mask " + to_string(mask.shape()) + " vs pattern " + to_string(pattern.shape()));
  if (!(kappa > 0.f && kappa <= 1.f)) throw PreconditionError("trapdoor: kappa must lie in (0,1]");
  for (Index i = 0; i < mask.size(); ++i)
    if (mask[i] != 0.f && mask[i] != kappa) throw PreconditionError("trapdoor: mask entry is neither 0 nor kappa");
  if (pattern.array().minCoeff() < 0.f || pattern.array().maxCoeff() > 1.f)
    throw PreconditionError("trapdoor: pattern outside [0,1]");
}

Index Trapdoor::masked_count() const { return Index((mask.array() != 0.f).count()); }

Tensor inject(const Tensor& x, const Trapdoor& t) {
  const Index per = t.mask.size();
  const bool single = x.shape() == t.mask.shape();
  if (!single && (x.rank() != t.mask.rank() + 1 || x.sample_shape() != t.mask.shape()))
    throw ShapeError("inject: input " + to_string(x.shape()) + " does not match trapdoor " + to_string(t.mask.shape()));
  Tensor out = x;
  const Index n = single ? 1 : x.dim(0);
  const auto& m = t.mask.array();
  const auto& p = t.pattern.array();
  for (Index i = 0; i < n; ++i) {
    auto seg = out.array().segment(i * per, per);
    seg = ((1.f - m) * seg + m * p).max(0.f).min(1.f);
  }
  return out;
}

Trapdoor make_single_square(const Shape& shape, int target, std::uint64_t seed, Index side, float kappa) {
  require_image_shape(shape, "make_single_square");
  if (side < 1 || side > shape[1] || side > shape[2])
    throw PreconditionError("make_single_square: side " + std::to_string(side) + " does not fit " + to_string(shape));
  Rng rng(seed);
  Trapdoor t = blank(shape, kappa, target);
  fill_uniform_noise(t, Square{shape[1] - side, shape[2] - side, side}, rng);
  return t;
}

Trapdoor make_multi_square(const Shape& shape, int target, std::uint64_t seed, const MultiSquareOptions& o) {
  require_image_shape(shape, "make_multi_square");
  Rng rng(seed);
  Occupancy occ(shape[1], shape[2]);
  return multi_square_at(shape, target, occ, rng, o);
}

Trapdoor make_trapdoor(const Shape& shape, const TrapdoorRecipe& r, std::uint64_t seed) {
  if (r.kind == TrapdoorKind::SingleSquare) return make_single_square(shape, r.target_label, seed, r.side, r.kappa);
  MultiSquareOptions o = r.multi;
  o.kappa = r.kappa;
  return make_multi_square(shape, r.target_label, seed, o);
}

int TrapdoorSet::target_label() const {
  if (trapdoors.empty()) throw PreconditionError("trapdoor set: empty");
  return trapdoors.front().target_label;
}

void TrapdoorSet::validate() const {
  const int label = target_label();
  for (const Trapdoor& t : trapdoors) {
    t.validate();
    if (t.target_label != label) throw PreconditionError("trapdoor set: members disagree on target label");
  }
}

TrapdoorSet make_trapdoor_set(const Shape& shape, const TrapdoorRecipe& r, int n, SetVariant variant,
                              std::uint64_t seed) {
  require_image_shape(shape, "make_trapdoor_set");
  if (n < 1) throw PreconditionError("make_trapdoor_set: n must be >= 1");
  TrapdoorSet set;
  set.trapdoors.push_back(make_trapdoor(shape, r, derive_seed(seed, "trapdoor", "base")));
  Rng rng(derive_seed(seed, "trapdoor", variant == SetVariant::Locations ? "locations" : "intensities"));
  Occupancy occ(shape[1], shape[2]);
  occ.mark(set.trapdoors[0].mask);
  MultiSquareOptions o = r.multi;
  o.kappa = r.kappa;
  for (int k = 1; k < n; ++k) {
    if (variant == SetVariant::Locations) {
      if (r.kind == TrapdoorKind::SingleSquare) {
        Trapdoor t = blank(shape, r.kappa, r.target_label);
        fill_uniform_noise(t, place_square(occ, r.side, rng), rng);
        set.trapdoors.push_back(std::move(t));
      } else {
        set.trapdoors.push_back(multi_square_at(shape, r.target_label, occ, rng, o));
      }
    } else {
      std::uniform_real_distribution<float> mu(0.f, 1.f);
      const IntensityParams p{mu(rng), r.multi.intensity.sigma};
      Trapdoor t = set.trapdoors[0];
      // Every connected square of the base mask gets one draw; painting per
      // distinct row-run of the mask is equivalent for axis-aligned squares.
      const Index c = shape[0], h = shape[1], w = shape[2];
      std::vector<int> component(std::size_t(h * w), -1);
      std::vector<float> level;
      for (Index i = 0; i < h * w; ++i) {
        if (t.mask[i] == 0.f || component[std::size_t(i)] >= 0) continue;
        const int id = int(level.size());
        level.push_back(draw_intensity(p, rng));
        std::vector<Index> stack{i};
        component[std::size_t(i)] = id;
        while (!stack.empty()) {
          const Index q = stack.back();
          stack.pop_back();
          const Index qr = q / w, qc = q % w;
          const Index nb[4][2] = {{qr - 1, qc}, {qr + 1, qc}, {qr, qc - 1}, {qr, qc + 1}};
          for (const auto& rc : nb) {
            if (rc[0] < 0 || rc[0] >= h || rc[1] < 0 || rc[1] >= w) continue;
            const Index j = rc[0] * w + rc[1];
            if (t.mask[j] != 0.f && component[std::size_t(j)] < 0) {
              component[std::size_t(j)] = id;
              stack.push_back(j);
            }
          }
        }
      }
      for (Index ch = 0; ch < c; ++ch)
        for (Index i = 0; i < h * w; ++i)
          t.pattern[ch * h * w + i] = component[std::size_t(i)] >= 0 ? level[std::size_t(component[std::size_t(i)])] : 0.f;
      set.trapdoors.push_back(std::move(t));
    }
  }
  return set;
}

void TrapdoorRegistry::add(TrapdoorSet set, std::vector<IntensityParams> params) {
  set.validate();
  const int label = set.target_label();
  if (sets.contains(label)) throw PreconditionError("registry: label " + std::to_string(label) + " already defended");
  if (!params.empty() && Index(params.size()) != set.size())
    throw PreconditionError("registry: one intensity entry per trapdoor expected");
  intensity[label] = std::move(params);
  sets.emplace(label, std::move(set));
}

std::vector<int> TrapdoorRegistry::labels() const {
  std::vector<int> out;
  for (const auto& [label, set] : sets) out.push_back(label);
  return out;
}

const TrapdoorSet& TrapdoorRegistry::at(int label) const {
  auto it = sets.find(label);
  if (it == sets.end()) throw PreconditionError("registry: label " + std::to_string(label) + " is not defended");
  return it->second;
}

TrapdoorRegistry make_single_label_registry(const Shape& shape, const TrapdoorRecipe& recipe, int n, SetVariant variant,
                                            std::uint64_t seed) {
  TrapdoorRegistry reg;
  reg.seed = seed;
  TrapdoorSet set = make_trapdoor_set(shape, recipe, n, variant, seed);
  std::vector<IntensityParams> params;
  for (const Trapdoor& t : set.trapdoors) {
    (void)t;
    params.push_back(recipe.kind == TrapdoorKind::SingleSquare ? kUniformNoiseMoments : recipe.multi.intensity);
  }
  reg.add(std::move(set), std::move(params));
  return reg;
}

TrapdoorRegistry make_all_label_registry(const Shape& shape, int num_classes, std::uint64_t seed,
                                         MultiSquareOptions options) {
  if (num_classes < 1) throw PreconditionError("make_all_label_registry: no labels");
  TrapdoorRegistry reg;
  reg.seed = seed;
  Rng rng(derive_seed(seed, "trapdoor", "all-label-intensity"));
  static const IntensityParams choices[3] = {{0.f, 1.f}, {1.f, 0.f}, {1.f, 1.f}};
  std::uniform_int_distribution<int> pick(0, 2);
  for (int label = 0; label < num_classes; ++label) {
    options.intensity = choices[pick(rng)];
    TrapdoorSet set;
    set.trapdoors.push_back(
        make_multi_square(shape, label, derive_seed(seed, "trapdoor", "label-" + std::to_string(label)), options));
    reg.add(std::move(set), {options.intensity});
  }
  return reg;
}

Dataset poison_dataset(const Dataset& clean, const TrapdoorRegistry& registry, double ratio, std::uint64_t seed) {
  if (clean.empty()) throw PreconditionError("poison_dataset: empty clean set");
  if (registry.empty()) throw PreconditionError("poison_dataset: registry has no trapdoors");
  if (!(ratio > 0.0 && ratio < 1.0)) throw PreconditionError("poison_dataset: injection ratio must lie in (0,1)");
  Rng rng(seed);
  Dataset poisoned;
  poisoned.num_classes = clean.num_classes;
  for (const auto& [label, set] : registry.sets) {
    const auto sources = clean.indices_without_label(label);
    if (sources.empty()) throw PreconditionError("poison_dataset: no sample with a label other than the target");
    const Index count = Index(std::ceil(ratio * double(clean.size()) - 1e-9));
    std::uniform_int_distribution<std::size_t> src(0, sources.size() - 1);
    std::uniform_int_distribution<Index> member(0, set.size() - 1);
    std::vector<Tensor> samples;
    samples.reserve(std::size_t(count));
    for (Index k = 0; k < count; ++k) {
      const Index i = sources[src(rng)];
      samples.push_back(inject(clean.inputs.row(i), set.trapdoors[std::size_t(member(rng))]));
    }
    Dataset part;
    part.num_classes = clean.num_classes;
    part.inputs = stack(std::span<const Tensor>(samples));
    part.labels.assign(std::size_t(count), label);
    poisoned = concat(poisoned, part);
  }
  return concat(clean, poisoned);
}

std::pair<Model, TrainLog> train_trapdoored(Model model, const Dataset& clean, const TrapdoorRegistry& registry,
                                            const TrapdoorTrainingConfig& config) {
  if (registry.empty()) throw PreconditionError("train_trapdoored: registry has no trapdoors");
  const std::uint64_t seed = derive_seed(config.train.seed, "trapdoor", "poison");
  if (!config.resample_each_epoch) {
    TrainLog log = train(model, poison_dataset(clean, registry, config.injection_ratio, seed), config.train);
    return {std::move(model), std::move(log)};
  }
  TrainLog log = train(
      model,
      [&](int epoch) {
        return poison_dataset(clean, registry, config.injection_ratio, derive_seed(seed, "trapdoor", "epoch-" + std::to_string(epoch)));
      },
      config.train);
  return {std::move(model), std::move(log)};
}

std::map<int, double> injection_success_rate(const Model& model, const Dataset& test, const TrapdoorRegistry& registry) {
  std::map<int, double> out;
  for (const auto& [label, set] : registry.sets) {
    const auto idx = test.indices_without_label(label);
    if (idx.empty()) throw PreconditionError("injection_success_rate: no eligible test samples for label " + std::to_string(label));
    const Tensor x = test.inputs.gather_rows(idx);
    double rate = 0;
    for (const Trapdoor& t : set.trapdoors) {
      const auto pred = predict(model, inject(x, t));
      rate += double(std::count(pred.begin(), pred.end(), label)) / double(pred.size());
    }
    out[label] = rate / double(set.size());
  }
  return out;
}

}  // namespace trapnet

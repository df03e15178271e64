#include "trapnet/attacks.hpp"

#include "trapnet/optim.hpp"
#include "trapnet/rng.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

namespace trapnet {

namespace {

constexpr Index kAttackChunk = 32;

Rng chunk_rng(const AttackConfig& cfg, Index chunk) {
  return Rng(derive_seed(cfg.seed, "attacks", to_string(cfg.method) + "-chunk-" + std::to_string(chunk)));
}

std::vector<int> argmax_rows(const Tensor& z) {
  std::vector<int> out(static_cast<std::size_t>(z.dim(0)));
  auto m = z.matrix();
  for (Index i = 0; i < z.dim(0); ++i) {
    Index best;
    m.row(i).maxCoeff(&best);
    out[std::size_t(i)] = int(best);
  }
  return out;
}

void check_batch(const Model& model, const Tensor& x, std::span<const int> targets, const char* who) {
  if (x.rank() < 2) throw ShapeError(std::string(who) + ": expected a batch");
  if (Index(targets.size()) != x.dim(0)) throw ShapeError(std::string(who) + ": target count mismatch");
  for (int t : targets)
    if (t < 0 || t >= model.spec().num_classes) throw PreconditionError(std::string(who) + ": target outside class range");
}

AdversarialBatch empty_batch(const Tensor& x, std::span<const int> targets) {
  AdversarialBatch b;
  b.x_adv = x;
  b.targets.assign(targets.begin(), targets.end());
  const auto n = std::size_t(x.dim(0));
  b.success.assign(n, false);
  b.query_count.assign(n, 0);
  b.final_loss.assign(n, 0.0);
  b.norms.assign(n, {});
  return b;
}

// Fills success and norms from x_adv; `seen` is what the model receives.
void finish(const Model& model, const Tensor& x, AdversarialBatch& b, const Tensor& seen) {
  const auto pred = predict(model, seen);
  const Index d = x.row_size();
  for (Index i = 0; i < x.dim(0); ++i) {
    const auto k = std::size_t(i);
    b.success[k] = pred[k] == b.targets[k];
    b.query_count[k] += 1;
    double l1 = 0, l2 = 0, li = 0;
    for (Index j = 0; j < d; ++j) {
      const double v = std::abs(double(b.x_adv[i * d + j]) - double(x[i * d + j]));
      l1 += v;
      l2 += v * v;
      li = std::max(li, v);
    }
    b.norms[k] = {l1, std::sqrt(l2), li};
  }
}

// Runs `kernel(rows, chunk_index)` on consecutive row ranges and writes the
// result rows back into the batch.
template <typename Kernel>
void for_chunks(const Tensor& x, std::span<const int> targets, AdversarialBatch& out, Kernel&& kernel) {
  const Index n = x.dim(0);
  for (Index b = 0, c = 0; b < n; b += kAttackChunk, ++c) {
    const Index cnt = std::min(kAttackChunk, n - b);
    const Tensor xc = x.rows(b, cnt);
    std::span<const int> tc = targets.subspan(std::size_t(b), std::size_t(cnt));
    auto p = kernel(xc, tc, c);
    out.x_adv.matrix().middleRows(b, cnt) = p.x_adv.matrix();
    for (Index i = 0; i < cnt; ++i) {
      out.final_loss[std::size_t(b + i)] = p.loss[std::size_t(i)];
      out.query_count[std::size_t(b + i)] = p.queries[std::size_t(i)];
    }
  }
}

struct ChunkResult {
  Tensor x_adv;
  std::vector<double> loss;
  std::vector<Index> queries;
};

// Model input after the optional straight-through quantizer.
Var<float> front_end(Var<float> x, int levels) { return levels > 0 ? quantize(x, levels, true) : x; }

struct Gradient {
  Tensor grad;
  std::vector<double> loss;
};

// Targeted cross-entropy, optionally plus w * sum_k cos(g(x), S_k).
struct SignaturePenalty {
  std::vector<Index> layers;
  std::vector<Index> indices;
  std::vector<Tensor> per_k;  // [n, |indices|] per signature slot
  double weight = 0;
};

Gradient ce_gradient(const Model& model, const Tensor& x, std::span<const int> targets, int levels,
                     const SignaturePenalty* penalty = nullptr) {
  Tape<float> tape;
  Var<float> xv = tape.variable(x);
  auto trace = model.forward(tape, front_end(xv, levels));
  Var<float> per = cross_entropy(trace.logits(), targets, Reduction::None);
  if (penalty && penalty->weight != 0) {
    std::vector<Var<float>> parts;
    for (Index l : penalty->layers) parts.push_back(flatten(trace.layers[std::size_t(l)]));
    Var<float> g = parts.size() == 1 ? parts[0] : concat_columns(parts);
    if (Index(penalty->indices.size()) != g.value().row_size()) g = select_columns(g, penalty->indices);
    for (const Tensor& s : penalty->per_k)
      per = per + scale(cosine_similarity(g, tape.constant(s)), float(penalty->weight));
  }
  tape.backward(sum(per));
  Gradient out;
  out.grad = xv.grad();
  out.loss.assign(per.value().data(), per.value().data() + per.value().size());
  return out;
}

void project(Tensor& xa, const Tensor& x0, double eps) {
  const float e = float(eps);
  xa.array() = xa.array().max(x0.array() - e).min(x0.array() + e).max(0.f).min(1.f);
}

ChunkResult signed_descent(const Model& model, const Tensor& x0, std::span<const int> t, const AttackConfig& cfg,
                           Index chunk, int levels, const SignaturePenalty* penalty) {
  Tensor xa = x0;
  if (cfg.random_start) {
    Rng rng = chunk_rng(cfg, chunk);
    xa = x0;
    xa.array() += Tensor::uniform(x0.shape(), -cfg.eps, cfg.eps, rng).array();
    project(xa, x0, cfg.eps);
  }
  const float alpha = float(cfg.alpha());
  std::vector<double> loss(std::size_t(x0.dim(0)), 0.0);
  for (int it = 0; it < cfg.iterations; ++it) {
    Gradient g = ce_gradient(model, xa, t, levels, penalty);
    xa.array() -= alpha * g.grad.array().sign();
    project(xa, x0, cfg.eps);
    loss = std::move(g.loss);
  }
  return {xa, loss, std::vector<Index>(std::size_t(x0.dim(0)), Index(cfg.iterations))};
}

double row_margin(const Tensor& z, Index i, int target) {
  auto m = z.matrix();
  double other = -std::numeric_limits<double>::infinity();
  for (Index j = 0; j < z.dim(1); ++j)
    if (j != target) other = std::max(other, double(m(i, j)));
  return other - double(m(i, target));
}

}  // namespace

// ------------------------------------------------------------------ config

std::string to_string(AttackMethod m) {
  switch (m) {
    case AttackMethod::Fgsm: return "fgsm";
    case AttackMethod::Pgd: return "pgd";
    case AttackMethod::Cw: return "cw";
    case AttackMethod::ElasticNet: return "elasticnet";
    case AttackMethod::Spsa: return "spsa";
    case AttackMethod::Bpda: return "bpda";
    case AttackMethod::OracleSignature: return "oracle";
    case AttackMethod::Vault: return "vault";
  }
  return "?";
}

AttackMethod parse_attack_method(const std::string& name) {
  std::string s;
  for (char c : name)
    if (c != '_' && c != '-') s += char(std::tolower(static_cast<unsigned char>(c)));
  for (AttackMethod m : {AttackMethod::Fgsm, AttackMethod::Pgd, AttackMethod::Cw, AttackMethod::ElasticNet,
                         AttackMethod::Spsa, AttackMethod::Bpda, AttackMethod::OracleSignature, AttackMethod::Vault})
    if (to_string(m) == s) return m;
  if (s == "ead" || s == "en") return AttackMethod::ElasticNet;
  if (s == "oraclesignature") return AttackMethod::OracleSignature;
  throw PreconditionError("unknown attack '" + name + "'");
}

std::vector<AttackMethod> standard_attacks() {
  return {AttackMethod::Cw, AttackMethod::ElasticNet, AttackMethod::Pgd,
          AttackMethod::Bpda, AttackMethod::Spsa, AttackMethod::Fgsm};
}

void AttackConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw PreconditionError(std::string("attack config: ") + what);
  };
  need(eps >= 0 && eps <= 1, "eps outside [0,1]");
  need(iterations >= 0, "negative iterations");
  need(alpha() <= eps || eps == 0, "step size larger than eps");
  need(cw.binary_steps >= 1 && cw.iterations >= 1 && cw.lr > 0 && cw.initial_const > 0, "cw options");
  need(en.binary_steps >= 1 && en.iterations >= 1 && en.lr > 0 && en.beta >= 0 && en.initial_const > 0,
       "elastic-net options");
  need(spsa.perturbation_size > 0 && spsa.lr > 0 && spsa.samples >= 1 && spsa.iterations >= 0, "spsa options");
  need(bpda.levels == 0 || bpda.levels >= 2, "bpda levels must be 0 (identity) or >= 2");
  need(adaptive.probe_count >= 0 && adaptive.known_trapdoors >= 1 && adaptive.kmeans_restarts >= 1 &&
           adaptive.kmeans_iterations >= 1,
       "adaptive options");
}

// ------------------------------------------------------------------ batch

Index AdversarialBatch::successes() const { return Index(std::count(success.begin(), success.end(), true)); }

double AdversarialBatch::success_rate() const { return success.empty() ? 0.0 : double(successes()) / double(size()); }

AdversarialResult AdversarialBatch::at(Index i) const {
  const auto k = std::size_t(i);
  return {x_adv.row(i), success.at(k), query_count.at(k), final_loss.at(k), norms.at(k)};
}

std::vector<Index> AdversarialBatch::successful_indices() const {
  std::vector<Index> out;
  for (std::size_t i = 0; i < success.size(); ++i)
    if (success[i]) out.push_back(Index(i));
  return out;
}

Tensor quantize_input(const Tensor& x, int levels) {
  if (levels <= 0) return x;
  Tape<float> tape;
  return quantize(tape.constant(x), levels, false).value();
}

Tensor system_input(const Tensor& x, const AttackConfig& config) {
  return config.method == AttackMethod::Bpda ? quantize_input(x, config.bpda.levels) : x;
}

std::vector<int> system_predict(const Model& model, const Tensor& x, const AttackConfig& config) {
  return predict(model, system_input(x, config));
}

// ------------------------------------------------------------------ gradient attacks

AdversarialBatch fgsm(const Model& model, const Tensor& x, std::span<const int> targets, double eps) {
  check_batch(model, x, targets, "fgsm");
  AdversarialBatch out = empty_batch(x, targets);
  AttackConfig cfg;
  cfg.method = AttackMethod::Fgsm;
  for_chunks(x, targets, out, [&](const Tensor& xc, std::span<const int> tc, Index) {
    Gradient g = ce_gradient(model, xc, tc, 0);
    Tensor xa = xc;
    xa.array() -= float(eps) * g.grad.array().sign();
    project(xa, xc, eps);
    return ChunkResult{xa, g.loss, std::vector<Index>(tc.size(), 1)};
  });
  finish(model, x, out, out.x_adv);
  return out;
}

AdversarialBatch pgd(const Model& model, const Tensor& x, std::span<const int> targets, const AttackConfig& config) {
  check_batch(model, x, targets, "pgd");
  config.validate();
  AdversarialBatch out = empty_batch(x, targets);
  for_chunks(x, targets, out, [&](const Tensor& xc, std::span<const int> tc, Index c) {
    return signed_descent(model, xc, tc, config, c, 0, nullptr);
  });
  finish(model, x, out, out.x_adv);
  return out;
}

AdversarialBatch bpda(const Model& model, const Tensor& x, std::span<const int> targets, const AttackConfig& config) {
  check_batch(model, x, targets, "bpda");
  config.validate();
  AdversarialBatch out = empty_batch(x, targets);
  for_chunks(x, targets, out, [&](const Tensor& xc, std::span<const int> tc, Index c) {
    return signed_descent(model, xc, tc, config, c, config.bpda.levels, nullptr);
  });
  finish(model, x, out, quantize_input(out.x_adv, config.bpda.levels));
  return out;
}

// ------------------------------------------------------------------ CW / EAD

namespace {

// Per-row squared L2 distance and margin-loss value and gradient for the
// tanh-parameterised CW objective.
struct CwStep {
  Tensor x;               // current image
  Tensor grad_w;          // d objective / d w
  std::vector<double> l2;  // squared
  std::vector<double> margin;
  std::vector<int> pred;
  double total = 0;
};

CwStep cw_step(const Model& model, const Tensor& w, const Tensor& x0, std::span<const int> t, const Tensor& c,
               float confidence) {
  Tape<float> tape;
  Var<float> wv = tape.variable(w);
  Var<float> xa = scale(tanh(wv), 0.5f) + tape.constant(Tensor(w.shape(), 0.5f));
  Var<float> diff = xa - tape.constant(x0);
  Var<float> l2 = sum_rows(diff * diff);
  auto trace = model.forward(tape, xa);
  Var<float> f = margin_loss(trace.logits(), t, confidence);
  Var<float> obj = sum(l2 + f * tape.constant(c));
  tape.backward(obj);
  CwStep s;
  s.x = xa.value();
  s.grad_w = wv.grad();
  s.l2.assign(l2.value().data(), l2.value().data() + l2.value().size());
  const Tensor& z = trace.logits().value();
  s.pred = argmax_rows(z);
  for (Index i = 0; i < z.dim(0); ++i) s.margin.push_back(row_margin(z, i, t[std::size_t(i)]));
  s.total = obj.value()[0];
  return s;
}

// Adjusts per-row constants after a binary-search step.
void update_constants(std::vector<double>& c, std::vector<double>& lo, std::vector<double>& hi,
                      const std::vector<bool>& succeeded) {
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (succeeded[i]) {
      hi[i] = std::min(hi[i], c[i]);
      c[i] = (lo[i] + hi[i]) / 2;
    } else {
      lo[i] = std::max(lo[i], c[i]);
      c[i] = hi[i] < 1e9 ? (lo[i] + hi[i]) / 2 : c[i] * 10;
    }
  }
}

Tensor constants_tensor(const std::vector<double>& c) {
  Tensor t(Shape{Index(c.size())});
  for (std::size_t i = 0; i < c.size(); ++i) t[Index(i)] = float(c[i]);
  return t;
}

bool reached(double margin, double confidence) { return margin <= -confidence; }

}  // namespace

AdversarialBatch cw_l2(const Model& model, const Tensor& x, std::span<const int> targets, const AttackConfig& config) {
  check_batch(model, x, targets, "cw_l2");
  config.validate();
  const CwOptions& o = config.cw;
  AdversarialBatch out = empty_batch(x, targets);
  for_chunks(x, targets, out, [&](const Tensor& x0, std::span<const int> tc, Index) {
    const auto n = tc.size();
    Tensor w0 = x0;
    w0.array() = ((x0.array() * 2.f - 1.f) * 0.999999f).atanh();
    std::vector<double> c(n, o.initial_const), lo(n, 0.0), hi(n, 1e10), best_l2(n, std::numeric_limits<double>::infinity());
    Tensor best = x0, last = x0;
    std::vector<double> loss(n, 0.0);
    std::vector<Index> queries(n, 0);
    for (int step = 0; step < o.binary_steps; ++step) {
      Parameter<float> w{w0, Tensor(), true};
      Optimizer<float> opt({OptimizerConfig::Method::Adam, o.lr});
      Parameter<float>* ps[] = {&w};
      const Tensor ct = constants_tensor(c);
      std::vector<bool> succeeded(n, false);
      double prev = std::numeric_limits<double>::infinity();
      for (int it = 0; it < o.iterations; ++it) {
        CwStep s = cw_step(model, w.value, x0, tc, ct, float(o.confidence));
        for (std::size_t i = 0; i < n; ++i) {
          ++queries[i];
          if (reached(s.margin[i], o.confidence) && s.pred[i] == tc[i]) {
            succeeded[i] = true;
            if (s.l2[i] < best_l2[i]) {
              best_l2[i] = s.l2[i];
              best.matrix().row(Index(i)) = s.x.matrix().row(Index(i));
            }
          }
          loss[i] = s.l2[i] + c[i] * std::max(s.margin[i], -o.confidence);
        }
        last = s.x;
        if (o.abort_early && it % 50 == 49) {
          if (s.total > prev * (1 - 1e-4)) break;
          prev = s.total;
        }
        w.grad = s.grad_w;
        opt.step(ps);
      }
      update_constants(c, lo, hi, succeeded);
    }
    Tensor result = best;
    for (std::size_t i = 0; i < n; ++i)
      if (!std::isfinite(best_l2[i])) result.matrix().row(Index(i)) = last.matrix().row(Index(i));
    return ChunkResult{result, loss, queries};
  });
  finish(model, x, out, out.x_adv);
  return out;
}

AdversarialBatch elastic_net(const Model& model, const Tensor& x, std::span<const int> targets,
                             const AttackConfig& config) {
  check_batch(model, x, targets, "elastic_net");
  config.validate();
  const ElasticNetOptions& o = config.en;
  AdversarialBatch out = empty_batch(x, targets);
  for_chunks(x, targets, out, [&](const Tensor& x0, std::span<const int> tc, Index) {
    const auto n = tc.size();
    const Index d = x0.row_size();
    std::vector<double> c(n, o.initial_const), lo(n, 0.0), hi(n, 1e10), best_en(n, std::numeric_limits<double>::infinity());
    Tensor best = x0, last = x0;
    std::vector<double> loss(n, 0.0);
    std::vector<Index> queries(n, 0);
    for (int step = 0; step < o.binary_steps; ++step) {
      Tensor xk = x0, yk = x0;
      const Tensor ct = constants_tensor(c);
      std::vector<bool> succeeded(n, false);
      double prev = std::numeric_limits<double>::infinity();
      for (int it = 0; it < o.iterations; ++it) {
        // gradient of c*f(y) + ||y - x0||^2 at the slack point
        Tape<float> tape;
        Var<float> yv = tape.variable(yk);
        Var<float> diff = yv - tape.constant(x0);
        auto trace = model.forward(tape, yv);
        Var<float> f = margin_loss(trace.logits(), tc, float(o.confidence));
        tape.backward(sum(sum_rows(diff * diff) + f * tape.constant(ct)));
        const double lr = o.lr * std::sqrt(1.0 - double(it) / double(o.iterations));
        const float thr = float(lr * o.beta);
        Tensor z = yk;
        z.array() -= float(lr) * yv.grad().array();
        // shrink towards x0, then box
        Tensor xn = x0;
        auto dz = (z.array() - x0.array());
        xn.array() = (dz > thr).select((z.array() - thr).min(1.f), (dz < -thr).select((z.array() + thr).max(0.f), x0.array()));
        const float mom = float(it) / float(it + 3);
        yk.array() = xn.array() + mom * (xn.array() - xk.array());
        yk.array() = yk.array().max(0.f).min(1.f);
        xk = std::move(xn);

        const Tensor zk = logits(model, xk);
        const auto pred = argmax_rows(zk);
        double total = 0;
        for (std::size_t i = 0; i < n; ++i) {
          queries[i] += 2;
          double l1 = 0, l2 = 0;
          for (Index j = 0; j < d; ++j) {
            const double v = double(xk[Index(i) * d + j]) - double(x0[Index(i) * d + j]);
            l1 += std::abs(v);
            l2 += v * v;
          }
          const double m = row_margin(zk, Index(i), tc[i]);
          const double en = o.beta * l1 + l2;
          loss[i] = c[i] * std::max(m, -o.confidence) + en;
          total += loss[i];
          if (reached(m, o.confidence) && pred[i] == tc[i]) {
            succeeded[i] = true;
            if (en < best_en[i]) {
              best_en[i] = en;
              best.matrix().row(Index(i)) = xk.matrix().row(Index(i));
            }
          }
        }
        last = xk;
        if (o.abort_early && it % 50 == 49) {
          if (total > prev * (1 - 1e-4)) break;
          prev = total;
        }
      }
      update_constants(c, lo, hi, succeeded);
    }
    Tensor result = best;
    for (std::size_t i = 0; i < n; ++i)
      if (!std::isfinite(best_en[i])) result.matrix().row(Index(i)) = last.matrix().row(Index(i));
    return ChunkResult{result, loss, queries};
  });
  finish(model, x, out, out.x_adv);
  return out;
}

// ------------------------------------------------------------------ SPSA

AdversarialBatch spsa(const Model& model, const Tensor& x, std::span<const int> targets, const AttackConfig& config) {
  check_batch(model, x, targets, "spsa");
  config.validate();
  const SpsaOptions& o = config.spsa;
  AdversarialBatch out = empty_batch(x, targets);
  for_chunks(x, targets, out, [&](const Tensor& x0, std::span<const int> tc, Index chunk) {
    const Index n = x0.dim(0), d = x0.row_size();
    Rng rng = chunk_rng(config, chunk);
    Tensor xa = x0;
    if (config.random_start) {
      xa.array() += Tensor::uniform(x0.shape(), -config.eps, config.eps, rng).array();
      project(xa, x0, config.eps);
    }
    // Adam moments over the perturbation
    Eigen::ArrayXf m = Eigen::ArrayXf::Zero(x0.size()), v = Eigen::ArrayXf::Zero(x0.size());
    const float b1 = 0.9f, b2 = 0.999f;
    std::vector<double> loss(std::size_t(n), 0.0);
    std::vector<Index> queries(std::size_t(n), 0);
    std::vector<bool> done(std::size_t(n), false);
    std::bernoulli_distribution coin(0.5);
    const float cpert = float(o.perturbation_size);
    for (int it = 0; it < o.iterations; ++it) {
      const Tensor z = logits(model, xa);
      std::vector<Index> active;
      for (Index i = 0; i < n; ++i) {
        const auto k = std::size_t(i);
        loss[k] = row_margin(z, i, tc[k]);
        queries[k] += done[k] ? 0 : 1;
        if (o.early_stop && !done[k] && loss[k] < 0) done[k] = true;
        if (!done[k]) active.push_back(i);
      }
      if (active.empty()) break;
      const auto na = Index(active.size());
      // probes laid out as [sample][row]; each has a + and - evaluation
      Tensor probes(Shape{o.samples * na, d});
      Tensor batch = [&] {
        Shape s = x0.shape();
        s[0] = 2 * o.samples * na;
        return Tensor(s);
      }();
      for (int s = 0; s < o.samples; ++s)
        for (Index a = 0; a < na; ++a) {
          const Index r = s * na + a;
          for (Index j = 0; j < d; ++j) probes[r * d + j] = coin(rng) ? 1.f : -1.f;
          auto base = xa.matrix().row(active[std::size_t(a)]);
          batch.matrix(2 * o.samples * na, d).row(2 * r) = base + cpert * probes.matrix().row(r);
          batch.matrix(2 * o.samples * na, d).row(2 * r + 1) = base - cpert * probes.matrix().row(r);
        }
      const Tensor zb = logits(model, batch);
      Eigen::ArrayXf grad = Eigen::ArrayXf::Zero(x0.size());
      for (int s = 0; s < o.samples; ++s)
        for (Index a = 0; a < na; ++a) {
          const Index r = s * na + a, row = active[std::size_t(a)];
          const int t = tc[std::size_t(row)];
          const double diff = row_margin(zb, 2 * r, t) - row_margin(zb, 2 * r + 1, t);
          grad.segment(row * d, d) += float(diff / (2.0 * cpert * o.samples)) * probes.matrix().row(r).transpose().array();
        }
      for (Index a = 0; a < na; ++a) queries[std::size_t(active[std::size_t(a)])] += 2 * o.samples;
      m = b1 * m + (1 - b1) * grad;
      v = b2 * v + (1 - b2) * grad.square();
      const float bc1 = 1 - std::pow(b1, float(it + 1)), bc2 = 1 - std::pow(b2, float(it + 1));
      Eigen::ArrayXf update = float(o.lr) * (m / bc1) / ((v / bc2).sqrt() + 1e-8f);
      for (Index a = 0; a < na; ++a) {
        const Index row = active[std::size_t(a)];
        xa.array().segment(row * d, d) -= update.segment(row * d, d);
      }
      project(xa, x0, config.eps);
    }
    return ChunkResult{xa, loss, queries};
  });
  finish(model, x, out, out.x_adv);
  return out;
}

// ------------------------------------------------------------------ adaptive

AdversarialBatch oracle_signature_attack(const Model& model, const Tensor& x, std::span<const int> targets,
                                         const std::map<int, std::vector<TrapdoorSignature>>& known,
                                         const AttackConfig& config) {
  check_batch(model, x, targets, "oracle_signature_attack");
  config.validate();
  std::optional<SignaturePenalty> base;
  for (int t : targets) {
    auto it = known.find(t);
    if (it == known.end() || it->second.empty())
      throw PreconditionError("oracle_signature_attack: no signature for target " + std::to_string(t));
    for (const auto& s : it->second) {
      if (!base) base = SignaturePenalty{s.layers, s.neuron_indices, {}, config.adaptive.distance_weight};
      if (s.layers != base->layers || s.neuron_indices != base->indices)
        throw PreconditionError("oracle_signature_attack: signatures disagree on neurons");
    }
  }
  AdversarialBatch out = empty_batch(x, targets);
  for_chunks(x, targets, out, [&](const Tensor& xc, std::span<const int> tc, Index c) {
    SignaturePenalty pen = *base;
    std::size_t slots = 0;
    for (int t : tc) slots = std::max(slots, known.at(t).size());
    const auto width = Index(pen.indices.size());
    for (std::size_t k = 0; k < slots; ++k) {
      Tensor s(Shape{Index(tc.size()), width});
      for (std::size_t i = 0; i < tc.size(); ++i) {
        const auto& sigs = known.at(tc[i]);
        const auto& v = sigs[std::min(k, sigs.size() - 1)].vector;
        for (Index j = 0; j < width; ++j) s[Index(i) * width + j] = v[std::size_t(j)];
      }
      pen.per_k.push_back(std::move(s));
    }
    return signed_descent(model, xc, tc, config, c, 0, &pen);
  });
  finish(model, x, out, out.x_adv);
  return out;
}

std::vector<std::vector<float>> kmeans(const Tensor& points, int k, int restarts, int iterations, std::uint64_t seed) {
  if (k < 1) throw PreconditionError("kmeans: k must be positive");
  if (points.rank() != 2 || points.dim(0) == 0) throw PreconditionError("kmeans: need a non-empty [M, D] matrix");
  const Index m = points.dim(0), d = points.dim(1);
  auto P = points.matrix().cast<double>().eval();
  {
    std::set<std::vector<float>> distinct;
    for (Index i = 0; i < m; ++i) distinct.insert(std::vector<float>(points.data() + i * d, points.data() + (i + 1) * d));
    if (Index(distinct.size()) < k)
      throw PreconditionError("kmeans: " + std::to_string(distinct.size()) + " distinct points for " +
                              std::to_string(k) + " clusters");
  }
  Rng rng(seed);
  Eigen::MatrixXd best;
  double best_inertia = std::numeric_limits<double>::infinity();
  for (int r = 0; r < restarts; ++r) {
    Eigen::MatrixXd C(k, d);
    // k-means++ seeding
    std::uniform_int_distribution<Index> first(0, m - 1);
    C.row(0) = P.row(first(rng));
    Eigen::VectorXd dist(m);
    for (int c = 1; c < k; ++c) {
      for (Index i = 0; i < m; ++i) dist[i] = (C.topRows(c).rowwise() - P.row(i)).rowwise().squaredNorm().minCoeff();
      std::discrete_distribution<Index> pick(dist.data(), dist.data() + m);
      C.row(c) = P.row(pick(rng));
    }
    std::vector<int> assign(std::size_t(m), -1);
    double inertia = 0;
    for (int it = 0; it < iterations; ++it) {
      bool changed = false;
      inertia = 0;
      for (Index i = 0; i < m; ++i) {
        Index a;
        inertia += (C.rowwise() - P.row(i)).rowwise().squaredNorm().minCoeff(&a);
        if (assign[std::size_t(i)] != int(a)) {
          assign[std::size_t(i)] = int(a);
          changed = true;
        }
      }
      if (!changed) break;
      Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(k, d);
      Eigen::VectorXd cnt = Eigen::VectorXd::Zero(k);
      for (Index i = 0; i < m; ++i) {
        sum.row(assign[std::size_t(i)]) += P.row(i);
        cnt[assign[std::size_t(i)]] += 1;
      }
      for (int c = 0; c < k; ++c)
        if (cnt[c] > 0) C.row(c) = sum.row(c) / cnt[c];
    }
    if (inertia < best_inertia) {
      best_inertia = inertia;
      best = C;
    }
  }
  std::vector<std::vector<float>> out(static_cast<std::size_t>(k));
  for (int c = 0; c < k; ++c)
    for (Index j = 0; j < d; ++j) out[std::size_t(c)].push_back(float(best(c, j)));
  return out;
}

AdversarialBatch vault_attack(const Model& model, const Dataset& probes, const Tensor& x, std::span<const int> targets,
                              const AttackConfig& config) {
  check_batch(model, x, targets, "vault_attack");
  config.validate();
  const int want = config.adaptive.probe_count;
  if (want <= 0 || probes.empty()) throw PreconditionError("vault_attack: no probe inputs");
  const Index layer = model.default_feature_layer();
  const Index width = model.layer_width(layer);
  std::vector<Index> all(static_cast<std::size_t>(width));
  std::iota(all.begin(), all.end(), Index{0});

  std::map<int, std::vector<TrapdoorSignature>> estimated;
  for (int t : std::set<int>(targets.begin(), targets.end())) {
    std::vector<Index> rows;
    for (Index i = 0; i < probes.size() && Index(rows.size()) < want; ++i)
      if (probes.labels[std::size_t(i)] != t) rows.push_back(i);
    if (Index(rows.size()) < 10) throw PreconditionError("vault_attack: fewer than 10 probe inputs");
    AttackConfig base = config;
    base.method = AttackMethod::Pgd;
    base.seed = derive_seed(config.seed, "attacks", "vault-probe-" + std::to_string(t));
    const std::vector<int> pt(rows.size(), t);
    AdversarialBatch probe_adv = pgd(model, probes.inputs.gather_rows(rows), pt, base);
    auto ok = probe_adv.successful_indices();
    if (Index(ok.size()) < config.adaptive.known_trapdoors) {
      ok.resize(rows.size());
      std::iota(ok.begin(), ok.end(), Index{0});
    }
    const Index l[] = {layer};
    const Tensor feats = feature_representation(model, probe_adv.x_adv.gather_rows(ok), l);
    for (auto& centroid : kmeans(feats, config.adaptive.known_trapdoors, config.adaptive.kmeans_restarts,
                                 config.adaptive.kmeans_iterations,
                                 derive_seed(config.seed, "attacks", "vault-kmeans-" + std::to_string(t)))) {
      TrapdoorSignature s;
      s.label = t;
      s.layers = {layer};
      s.neuron_indices = all;
      s.vector = std::move(centroid);
      s.n_samples = Index(ok.size());
      estimated[t].push_back(std::move(s));
    }
  }
  AttackConfig oc = config;
  oc.method = AttackMethod::OracleSignature;
  oc.seed = derive_seed(config.seed, "attacks", "vault-oracle");
  AdversarialBatch out = oracle_signature_attack(model, x, targets, estimated, oc);
  out.estimated_signatures = std::move(estimated);
  return out;
}

AdversarialBatch run_attack(const Model& model, const Tensor& x, std::span<const int> targets,
                            const AttackConfig& config, const Detector* detector, const Dataset* probes) {
  switch (config.method) {
    case AttackMethod::Fgsm: return fgsm(model, x, targets, config.eps);
    case AttackMethod::Pgd: return pgd(model, x, targets, config);
    case AttackMethod::Cw: return cw_l2(model, x, targets, config);
    case AttackMethod::ElasticNet: return elastic_net(model, x, targets, config);
    case AttackMethod::Spsa: return spsa(model, x, targets, config);
    case AttackMethod::Bpda: return bpda(model, x, targets, config);
    case AttackMethod::OracleSignature:
      if (!detector) throw PreconditionError("oracle attack needs the defender's signatures");
      return oracle_signature_attack(model, x, targets, detector->signatures, config);
    case AttackMethod::Vault:
      if (!probes) throw PreconditionError("vault attack needs probe inputs");
      return vault_attack(model, *probes, x, targets, config);
  }
  throw PreconditionError("run_attack: unknown method");
}

}  // namespace trapnet

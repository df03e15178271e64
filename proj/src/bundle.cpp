#include "trapnet/bundle.hpp"

#include <json.hpp>
#include <openssl/sha.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>

namespace trapnet {

namespace {

static_assert(std::endian::native == std::endian::little, "bundle encoding assumes a little-endian host");

using json = nlohmann::json;
constexpr char kMagic[8] = {'T', 'R', 'A', 'P', 'N', 'E', 'T', 'B'};

class Writer {
 public:
  template <typename T>
  void put(T v) {
    out_.append(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(std::string_view s) { out_.append(s); }
  void section(const std::string& name, std::string_view payload) {
    put<std::uint32_t>(std::uint32_t(name.size()));
    bytes(name);
    put<std::uint64_t>(payload.size());
    bytes(payload);
  }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n)
      throw FormatError("bundle truncated at offset " + std::to_string(pos_) + " (need " + std::to_string(n) +
                        " bytes, have " + std::to_string(in_.size() - pos_) + ")");
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

std::string encode_tensor(const Tensor& t) {
  Writer w;
  w.put<std::uint32_t>(std::uint32_t(t.rank()));
  for (Index d : t.shape()) w.put<std::int64_t>(d);
  w.bytes(std::string_view(reinterpret_cast<const char*>(t.data()), std::size_t(t.size()) * sizeof(float)));
  return std::move(w.str());
}

Tensor decode_tensor(std::string_view payload) {
  Reader r(payload);
  const auto rank = r.get<std::uint32_t>();
  if (rank > 8) throw FormatError("bundle: tensor rank " + std::to_string(rank));
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto d = r.get<std::int64_t>();
    if (d < 0) throw FormatError("bundle: negative tensor extent");
    shape.push_back(d);
  }
  Tensor t(shape);
  auto raw = r.bytes(std::size_t(t.size()) * sizeof(float));
  std::memcpy(t.data(), raw.data(), raw.size());
  if (!r.done()) throw FormatError("bundle: trailing bytes after tensor");
  return t;
}

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::MaxPool2d: return "maxpool2d";
    case LayerKind::AvgPool2d: return "avgpool2d";
    case LayerKind::Dense: return "dense";
  }
  return "?";
}

LayerKind kind_from(const std::string& s) {
  for (LayerKind k : {LayerKind::Conv2d, LayerKind::MaxPool2d, LayerKind::AvgPool2d, LayerKind::Dense})
    if (s == kind_name(k)) return k;
  throw FormatError("bundle: unknown layer kind '" + s + "'");
}

json spec_json(const ModelSpec& spec, int trained_epochs) {
  json layers = json::array();
  for (const auto& l : spec.layers)
    layers.push_back({{"kind", kind_name(l.kind)},
                      {"units", l.units},
                      {"kernel", l.kernel},
                      {"stride", l.stride},
                      {"padding", l.padding == Padding::Same ? "same" : "valid"},
                      {"activation", l.activation == Activation::Relu ? "relu" : "none"}});
  return {{"name", spec.name},
          {"input_shape", spec.input_shape},
          {"num_classes", spec.num_classes},
          {"layers", layers},
          {"trained_epochs", trained_epochs}};
}

ModelSpec spec_from(const json& j) {
  ModelSpec s;
  s.name = j.at("name").get<std::string>();
  s.input_shape = j.at("input_shape").get<Shape>();
  s.num_classes = j.at("num_classes").get<int>();
  for (const auto& l : j.at("layers")) {
    LayerSpec ls;
    ls.kind = kind_from(l.at("kind").get<std::string>());
    ls.units = l.at("units").get<Index>();
    ls.kernel = l.at("kernel").get<Index>();
    ls.stride = l.at("stride").get<Index>();
    ls.padding = l.at("padding").get<std::string>() == "same" ? Padding::Same : Padding::Valid;
    ls.activation = l.at("activation").get<std::string>() == "relu" ? Activation::Relu : Activation::None;
    s.layers.push_back(ls);
  }
  return s;
}

// JSON has no infinities; thresholds can be -inf when fpr is 1.
json real(double v) {
  if (std::isfinite(v)) return v;
  return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
}

double real_from(const json& j) {
  if (j.is_number()) return j.get<double>();
  const auto s = j.get<std::string>();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  return std::numeric_limits<double>::quiet_NaN();
}

json detector_json(const Detector& d) {
  json labels = json::array();
  for (const auto& [label, sigs] : d.signatures) {
    json js = json::array();
    for (const auto& s : sigs)
      js.push_back({{"label", s.label},
                    {"layers", s.layers},
                    {"neuron_indices", s.neuron_indices},
                    {"vector", s.vector},
                    {"n_samples", s.n_samples}});
    json entry = {{"label", label}, {"signatures", js}};
    if (auto it = d.thresholds.find(label); it != d.thresholds.end()) entry["threshold"] = real(it->second);
    if (auto it = d.calibration_similarities.find(label); it != d.calibration_similarities.end())
      entry["calibration"] = it->second;
    labels.push_back(entry);
  }
  return {{"fpr_target", d.fpr_target},
          {"neuron_fraction", d.neuron_fraction},
          {"subset_seed", d.subset_seed},
          {"labels", labels}};
}

Detector detector_from(const json& j) {
  Detector d;
  d.fpr_target = j.at("fpr_target").get<double>();
  d.neuron_fraction = j.at("neuron_fraction").get<double>();
  d.subset_seed = j.at("subset_seed").get<std::uint64_t>();
  for (const auto& e : j.at("labels")) {
    const int label = e.at("label").get<int>();
    auto& sigs = d.signatures[label];
    for (const auto& s : e.at("signatures")) {
      TrapdoorSignature sig;
      sig.label = s.at("label").get<int>();
      sig.layers = s.at("layers").get<std::vector<Index>>();
      sig.neuron_indices = s.at("neuron_indices").get<std::vector<Index>>();
      sig.vector = s.at("vector").get<std::vector<float>>();
      sig.n_samples = s.at("n_samples").get<Index>();
      sigs.push_back(std::move(sig));
    }
    if (e.contains("threshold")) d.thresholds[label] = real_from(e.at("threshold"));
    if (e.contains("calibration")) d.calibration_similarities[label] = e.at("calibration").get<std::vector<double>>();
  }
  return d;
}

std::string trapdoor_key(const char* what, int label, std::size_t k) {
  return std::string("registry.") + what + ":" + std::to_string(label) + ":" + std::to_string(k);
}

}  // namespace

std::string hex(const Digest& d) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (unsigned char c : d) {
    s.push_back(digits[c >> 4]);
    s.push_back(digits[c & 15]);
  }
  return s;
}

Digest sha256(std::string_view bytes) {
  Digest d{};
  SHA256(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), d.data());
  return d;
}

std::string encode_bundle(const ArtifactBundle& b) {
  std::vector<std::pair<std::string, std::string>> sections;
  json manifest = {{"format", "trapnet-bundle"}, {"version", kBundleVersion}};
  if (b.model) {
    sections.emplace_back("model.spec", spec_json(b.model->spec(), b.model->trained_epochs()).dump());
    for (const auto& [name, p] : b.model->params()) sections.emplace_back("model.param:" + name, encode_tensor(p.value));
  }
  if (b.registry) {
    json labels = json::array();
    for (const auto& [label, set] : b.registry->sets) {
      json members = json::array();
      for (std::size_t k = 0; k < set.trapdoors.size(); ++k) {
        const auto& t = set.trapdoors[k];
        members.push_back({{"kappa", t.kappa}, {"target_label", t.target_label}});
        sections.emplace_back(trapdoor_key("mask", label, k), encode_tensor(t.mask));
        sections.emplace_back(trapdoor_key("pattern", label, k), encode_tensor(t.pattern));
      }
      json intensity = json::array();
      if (auto it = b.registry->intensity.find(label); it != b.registry->intensity.end())
        for (const auto& p : it->second) intensity.push_back({{"mu", p.mu}, {"sigma", p.sigma}});
      labels.push_back({{"label", label}, {"trapdoors", members}, {"intensity", intensity}});
    }
    sections.emplace_back("registry", json{{"seed", b.registry->seed}, {"labels", labels}}.dump());
  }
  if (b.detector) sections.emplace_back("detector", detector_json(*b.detector).dump());
  if (!b.config_text.empty()) sections.emplace_back("config", b.config_text);

  json names = json::array();
  for (const auto& s : sections) names.push_back(s.first);
  manifest["sections"] = names;

  Writer w;
  w.bytes(std::string_view(kMagic, sizeof kMagic));
  w.put<std::uint32_t>(kBundleVersion);
  w.put<std::uint32_t>(std::uint32_t(sections.size() + 1));
  w.section("manifest", manifest.dump());
  for (const auto& [name, payload] : sections) w.section(name, payload);
  const Digest d = sha256(w.str());
  w.bytes(std::string_view(reinterpret_cast<const char*>(d.data()), d.size()));
  return std::move(w.str());
}

ArtifactBundle decode_bundle(std::string_view bytes) {
  Reader r(bytes);
  if (r.bytes(sizeof kMagic) != std::string_view(kMagic, sizeof kMagic))
    throw FormatError("bundle: bad magic at offset 0");
  const auto version = r.get<std::uint32_t>();
  if (version != kBundleVersion)
    throw FormatError("bundle: version " + std::to_string(version) + " not supported (expected " +
                      std::to_string(kBundleVersion) + ")");
  const auto count = r.get<std::uint32_t>();
  std::map<std::string, std::string_view> sec;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto nlen = r.get<std::uint32_t>();
    std::string name(r.bytes(nlen));
    const auto plen = r.get<std::uint64_t>();
    sec[name] = r.bytes(std::size_t(plen));
  }
  const std::size_t body = r.pos();
  Digest stored{};
  std::memcpy(stored.data(), r.bytes(stored.size()).data(), stored.size());
  if (!r.done()) throw FormatError("bundle: trailing bytes after digest at offset " + std::to_string(r.pos()));
  if (sha256(bytes.substr(0, body)) != stored) throw FormatError("bundle: content hash mismatch");

  ArtifactBundle b;
  try {
    if (auto it = sec.find("model.spec"); it != sec.end()) {
      const json j = json::parse(it->second);
      ModelSpec spec = spec_from(j);
      Model::ParamMap params;
      for (const auto& [name, shape] : spec.parameter_shapes()) {
        auto p = sec.find("model.param:" + name);
        if (p == sec.end()) throw FormatError("bundle: missing parameter " + name);
        params[name] = Parameter<float>{decode_tensor(p->second), Tensor(), true};
      }
      Model m(std::move(spec), std::move(params));
      m.set_trained_epochs(j.at("trained_epochs").get<int>());
      b.model = std::move(m);
    }
    if (auto it = sec.find("registry"); it != sec.end()) {
      const json j = json::parse(it->second);
      TrapdoorRegistry reg;
      reg.seed = j.at("seed").get<std::uint64_t>();
      for (const auto& e : j.at("labels")) {
        const int label = e.at("label").get<int>();
        TrapdoorSet set;
        std::size_t k = 0;
        for (const auto& m : e.at("trapdoors")) {
          Trapdoor t;
          t.kappa = m.at("kappa").get<float>();
          t.target_label = m.at("target_label").get<int>();
          auto mask = sec.find(trapdoor_key("mask", label, k));
          auto pat = sec.find(trapdoor_key("pattern", label, k));
          if (mask == sec.end() || pat == sec.end()) throw FormatError("bundle: missing trapdoor tensors");
          t.mask = decode_tensor(mask->second);
          t.pattern = decode_tensor(pat->second);
          set.trapdoors.push_back(std::move(t));
          ++k;
        }
        std::vector<IntensityParams> ip;
        for (const auto& p : e.at("intensity")) ip.push_back({p.at("mu").get<float>(), p.at("sigma").get<float>()});
        reg.add(std::move(set), std::move(ip));
      }
      b.registry = std::move(reg);
    }
    if (auto it = sec.find("detector"); it != sec.end()) b.detector = detector_from(json::parse(it->second));
    if (auto it = sec.find("config"); it != sec.end()) b.config_text = std::string(it->second);
  } catch (const json::exception& e) {
    throw FormatError(std::string("bundle: malformed section: ") + e.what());
  }
  return b;
}

Digest bundle_hash(const ArtifactBundle& bundle) {
  const std::string bytes = encode_bundle(bundle);
  Digest d{};
  std::memcpy(d.data(), bytes.data() + bytes.size() - d.size(), d.size());
  return d;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), std::streamsize(contents.size()));
    out.flush();
    if (!out) throw Error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void save_bundle(const ArtifactBundle& bundle, const std::filesystem::path& path) {
  write_file_atomic(path, encode_bundle(bundle));
}

ArtifactBundle load_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open bundle " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_bundle(bytes);
}

}  // namespace trapnet

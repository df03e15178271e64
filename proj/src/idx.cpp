#include "trapnet/idx.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

namespace trapnet {

namespace {

std::string hex(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex;
  os.width(8);
  os.fill('0');
  os << v;
  return os.str();
}

struct Reader {
  const std::vector<std::uint8_t>& bytes;
  std::string name;
  std::size_t pos = 0;

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = (std::uint32_t(bytes[pos]) << 24) | (std::uint32_t(bytes[pos + 1]) << 16) |
                      (std::uint32_t(bytes[pos + 2]) << 8) | std::uint32_t(bytes[pos + 3]);
    pos += 4;
    return v;
  }
  void need(std::size_t n) const {
    if (pos + n > bytes.size())
      throw FormatError(name + ": truncated at offset " + std::to_string(pos) + " (need " + std::to_string(n) +
                        " bytes, have " + std::to_string(bytes.size() - pos) + ")");
  }
};

struct Header {
  IdxType type;
  Shape dims;
  std::size_t payload;
};

Header parse_header(Reader& r) {
  const std::uint32_t magic = r.u32();
  if ((magic >> 16) != 0)
    throw FormatError(r.name + ": bad IDX magic " + hex(magic) + " at offset 0");
  const auto type = std::uint8_t((magic >> 8) & 0xff);
  if (type != std::uint8_t(IdxType::UInt8) && type != std::uint8_t(IdxType::Float32))
    throw FormatError(r.name + ": unsupported IDX element type at offset 2 (magic " + hex(magic) + ")");
  const int rank = int(magic & 0xff);
  if (rank < 1) throw FormatError(r.name + ": IDX rank 0 at offset 3");
  Header h{IdxType(type), {}, r.pos};
  for (int i = 0; i < rank; ++i) {
    const std::size_t off = r.pos;
    const std::uint32_t d = r.u32();
    if (d == 0) throw FormatError(r.name + ": zero extent at offset " + std::to_string(off));
    h.dims.push_back(Index(d));
  }
  h.payload = r.pos;
  return h;
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(std::uint8_t((v >> s) & 0xff));
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.extension() == ".gz") {
    gzFile f = gzopen(path.string().c_str(), "wb9");
    if (!f) throw Error("cannot open " + path.string() + " for writing");
    const int n = gzwrite(f, bytes.data(), unsigned(bytes.size()));
    gzclose(f);
    if (n != int(bytes.size())) throw Error("short gzip write to " + path.string());
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw Error("short write to " + path.string());
}

}  // namespace

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (raw.size() < 2 || raw[0] != 0x1f || raw[1] != 0x8b) return raw;
  gzFile gz = gzopen(path.string().c_str(), "rb");
  if (!gz) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  int n;
  while ((n = gzread(gz, buf, sizeof(buf))) > 0) out.insert(out.end(), buf, buf + n);
  const bool bad = n < 0;
  gzclose(gz);
  if (bad) throw FormatError(path.string() + ": corrupt gzip stream");
  return out;
}

Tensor read_idx_tensor(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  Reader r{bytes, path.string()};
  const Header h = parse_header(r);
  const Index n = numel(h.dims);
  Tensor t(h.dims);
  if (h.type == IdxType::UInt8) {
    r.need(std::size_t(n));
    for (Index i = 0; i < n; ++i) t[i] = float(bytes[h.payload + std::size_t(i)]) / 255.f;
    r.pos += std::size_t(n);
  } else {
    r.need(std::size_t(n) * 4);
    for (Index i = 0; i < n; ++i) t[i] = std::bit_cast<float>(r.u32());
  }
  return t;
}

std::vector<int> read_idx_labels(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  Reader r{bytes, path.string()};
  const std::uint32_t magic = r.u32();
  if (magic != kIdxLabelsMagic)
    throw FormatError(r.name + ": expected label magic " + hex(kIdxLabelsMagic) + ", found " + hex(magic) + " at offset 0");
  const std::uint32_t n = r.u32();
  r.need(n);
  return std::vector<int>(bytes.begin() + 8, bytes.begin() + 8 + n);
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, int num_classes) {
  const auto bytes = read_file_bytes(images);
  Reader r{bytes, images.string()};
  const std::uint32_t magic = r.u32();
  if (magic != kIdxImagesMagic)
    throw FormatError(r.name + ": expected image magic " + hex(kIdxImagesMagic) + ", found " + hex(magic) + " at offset 0");
  r.pos = 0;
  const Header h = parse_header(r);
  if (h.type != IdxType::UInt8 || h.dims.size() != 3)
    throw FormatError(r.name + ": image file must be a rank-3 uint8 IDX array");
  const Index n = numel(h.dims);
  r.need(std::size_t(n));
  Dataset d;
  d.num_classes = num_classes;
  d.inputs = Tensor(Shape{h.dims[0], 1, h.dims[1], h.dims[2]});
  for (Index i = 0; i < n; ++i) d.inputs[i] = float(bytes[h.payload + std::size_t(i)]) / 255.f;
  d.labels = read_idx_labels(labels);
  if (Index(d.labels.size()) != h.dims[0])
    throw FormatError("load_idx: " + std::to_string(h.dims[0]) + " images but " + std::to_string(d.labels.size()) +
                      " labels");
  d.validate();
  return d;
}

void write_idx_tensor(const std::filesystem::path& path, const Tensor& t, IdxType type) {
  std::vector<std::uint8_t> out;
  put_u32(out, (std::uint32_t(type) << 8) | std::uint32_t(t.rank()));
  for (Index d : t.shape()) put_u32(out, std::uint32_t(d));
  if (type == IdxType::UInt8) {
    if (t.array().minCoeff() < 0.f || t.array().maxCoeff() > 1.f)
      throw PreconditionError("write_idx_tensor: uint8 output needs values in [0,1]");
    for (Index i = 0; i < t.size(); ++i) out.push_back(std::uint8_t(std::lround(t[i] * 255.f)));
  } else {
    for (Index i = 0; i < t.size(); ++i) put_u32(out, std::bit_cast<std::uint32_t>(t[i]));
  }
  write_bytes(path, out);
}

void write_idx_labels(const std::filesystem::path& path, std::span<const int> labels) {
  std::vector<std::uint8_t> out;
  put_u32(out, kIdxLabelsMagic);
  put_u32(out, std::uint32_t(labels.size()));
  for (int l : labels) {
    if (l < 0 || l > 255) throw PreconditionError("write_idx_labels: label outside byte range");
    out.push_back(std::uint8_t(l));
  }
  write_bytes(path, out);
}

}  // namespace trapnet

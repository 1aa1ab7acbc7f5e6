#include <bit>
#include <cstring>
#include <string>

#include "skelgraph/data.hpp"
#include "skelgraph/errors.hpp"
#include "skelgraph/trainer.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

namespace skelgraph {

namespace {

constexpr char kMagic[8] = {'S', 'K', 'G', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& buf, std::string path) : buf_(buf), path_(std::move(path)) {}

  template <typename T>
  T get() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void get_raw(std::vector<unsigned char>& out, std::size_t n) {
    need(n);
    out.resize(n);
    std::memcpy(out.data(), buf_.data() + pos_, n);
    pos_ += n;
  }

  bool exhausted() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) {
    if (pos_ + n > buf_.size()) throw FormatError(path_ + ": truncated checkpoint");
  }
  const std::string& buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const CheckpointData& ckpt, const std::string& path) {
  std::string out;
  out.append(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, ckpt.version);
  const std::string meta = ckpt.meta.dump();
  put<std::uint64_t>(out, meta.size());
  out += meta;
  put<std::uint64_t>(out, ckpt.arrays.size());
  for (const auto& a : ckpt.arrays) {
    if (a.dtype != 4 && a.dtype != 8) throw UsageError("checkpoint array dtype must be 4 or 8");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(a.name.size()));
    out += a.name;
    put<std::uint8_t>(out, a.dtype);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(a.shape.size()));
    for (std::size_t d : a.shape) put<std::uint64_t>(out, d);
    if (a.raw.size() != shape_numel(a.shape) * a.dtype) {
      throw UsageError("checkpoint array '" + a.name + "' payload size mismatch");
    }
    out.append(reinterpret_cast<const char*>(a.raw.data()), a.raw.size());
  }
  write_file_atomic(path, out);
}

CheckpointData load_checkpoint(const std::string& path) {
  const std::string buf = read_file(path);
  Reader r(buf, path);
  if (r.get_bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    throw FormatError(path + ": not a checkpoint file");
  }
  CheckpointData ckpt;
  ckpt.version = r.get<std::uint32_t>();
  if (ckpt.version != kVersion) {
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(ckpt.version));
  }
  const auto meta_len = r.get<std::uint64_t>();
  try {
    ckpt.meta = nlohmann::json::parse(r.get_bytes(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad checkpoint metadata: " + e.what());
  }
  const auto count = r.get<std::uint64_t>();
  ckpt.arrays.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointArray a;
    const auto name_len = r.get<std::uint16_t>();
    a.name = r.get_bytes(name_len);
    a.dtype = r.get<std::uint8_t>();
    if (a.dtype != 4 && a.dtype != 8) throw FormatError(path + ": bad array dtype");
    const auto rank = r.get<std::uint8_t>();
    a.shape.resize(rank);
    for (auto& d : a.shape) d = r.get<std::uint64_t>();
    r.get_raw(a.raw, shape_numel(a.shape) * a.dtype);
    ckpt.arrays.push_back(std::move(a));
  }
  if (!r.exhausted()) throw FormatError(path + ": trailing bytes after checkpoint payload");
  return ckpt;
}

}  // namespace skelgraph

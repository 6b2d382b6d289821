#include "coperc/models/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace coperc::models {
namespace {

template <typename T>
void put(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw CheckpointError(path_ + ": truncated checkpoint");
  }
  std::string data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  std::string out = "CPCK";
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, params.config().hash());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.entries().size()));
  for (const auto& [name, t] : params.entries()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    for (double v : t.values()) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  os.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!os) throw CheckpointError("failed writing " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig& config) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  Reader r(ss.str(), path.string());
  if (r.bytes(4) != "CPCK") throw CheckpointError(path.string() + ": not a checkpoint (bad magic)");
  if (auto v = r.get<std::uint32_t>(); v != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": unsupported version " + std::to_string(v));
  }
  if (r.get<std::uint64_t>() != config.hash()) {
    throw CheckpointError(path.string() + ": config hash mismatch (checkpoint was trained with another model config)");
  }
  ModelParams params(config, 0);
  const auto n = r.get<std::uint32_t>();
  if (n != params.entries().size()) throw CheckpointError(path.string() + ": tensor count mismatch");
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto name = r.bytes(r.get<std::uint32_t>());
    ad::Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = static_cast<std::int64_t>(r.get<std::uint64_t>());
    std::vector<double> v(static_cast<std::size_t>(ad::numel(shape)));
    for (auto& x : v) x = std::bit_cast<float>(r.get<std::uint32_t>());
    try {
      params.set(name, ad::Tensor(shape, std::move(v)));
    } catch (const std::exception& e) {
      throw CheckpointError(path.string() + ": " + e.what());
    }
  }
  if (!r.done()) throw CheckpointError(path.string() + ": trailing bytes");
  return params;
}

}  // namespace coperc::models

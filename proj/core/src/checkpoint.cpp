#include "simr/checkpoint.hpp"

#include <cstring>
#include <string_view>

#include "simr/error.hpp"
#include "simr/io.hpp"

namespace simr {

namespace {

constexpr std::string_view kMagic = "CARZCKPT";

template <typename U>
void put(std::vector<char>& out, U v) {
  const auto* p = reinterpret_cast<const char*>(&v);
  out.insert(out.end(), p, p + sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::span<const char> bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    U v;
    std::memcpy(&v, take(sizeof(U), what), sizeof(U));
    return v;
  }

  const char* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what, pos_);
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<char> encode_checkpoint(const ParamStore<float>& params) {
  std::vector<char> out(kMagic.begin(), kMagic.end());
  put<std::uint32_t>(out, checkpoint_version);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    if (p.name.size() > 0xFFFF) throw ContractError("checkpoint: name too long: " + p.name.substr(0, 40));
    put<std::uint16_t>(out, static_cast<std::uint16_t>(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(p.tensor.shape.size()));
    for (auto d : p.tensor.shape) put<std::uint64_t>(out, d);
    const auto* data = reinterpret_cast<const char*>(p.tensor.data.data());
    out.insert(out.end(), data, data + p.tensor.data.size() * sizeof(float));
  }
  return out;
}

std::vector<NamedTensor<float>> decode_checkpoint(std::span<const char> bytes) {
  Reader r(bytes);
  if (std::string_view(r.take(kMagic.size(), "magic"), kMagic.size()) != kMagic) {
    throw FormatError("checkpoint: bad magic", 0);
  }
  const auto version_at = r.pos();
  const auto version = r.get<std::uint32_t>("version");
  if (version != checkpoint_version) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version), version_at);
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  std::vector<NamedTensor<float>> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint16_t>("name length");
    std::string name(r.take(name_len, "name"), name_len);
    const auto ndim_at = r.pos();
    const auto ndim = r.get<std::uint8_t>("ndim");
    if (ndim == 0) throw FormatError("checkpoint: tensor '" + name + "' has zero dimensions", ndim_at);
    Shape shape(ndim);
    std::uint64_t elements = 1;
    for (auto& d : shape) {
      const auto at = r.pos();
      const auto dim = r.get<std::uint64_t>("dimension");
      if (dim == 0 || dim > (bytes.size() / sizeof(float)) || elements > bytes.size() / dim) {
        throw FormatError("checkpoint: implausible dimension for '" + name + "'", at);
      }
      d = static_cast<std::size_t>(dim);
      elements *= dim;
    }
    std::vector<float> data(elements);
    std::memcpy(data.data(), r.take(elements * sizeof(float), "payload"), elements * sizeof(float));
    out.push_back({std::move(name), Tensor<float>(std::move(shape), std::move(data))});
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes", r.pos());
  return out;
}

void save_checkpoint(const ParamStore<float>& params, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(params));
}

std::vector<NamedTensor<float>> read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

void load_checkpoint(ParamStore<float>& params, const std::filesystem::path& path) {
  auto tensors = read_checkpoint(path);
  if (tensors.size() != params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model expects " +
                          std::to_string(params.size()),
                      0);
  }
  for (auto& t : tensors) {
    if (!params.contains(t.name)) throw FormatError("checkpoint tensor '" + t.name + "' is not a model parameter", 0);
    auto& dst = params.get(t.name);
    if (dst.shape != t.tensor.shape) {
      throw FormatError("checkpoint tensor '" + t.name + "' has shape " + shape_str(t.tensor.shape) +
                            ", model expects " + shape_str(dst.shape),
                        0);
    }
    dst.data = std::move(t.tensor.data);
  }
}

}  // namespace simr

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lfme/autodiff.hpp"
#include "lfme/errors.hpp"
#include "lfme/random.hpp"
#include "lfme/tensor.hpp"

namespace lfme {

struct Linear {
  Parameter weight;  // fan_in x fan_out
  Parameter bias;    // fan_out
};

/// Fully connected ReLU network producing raw logits. Used for the experts,
/// the target model and the domain-weighting network alike.
class MlpModel {
 public:
  MlpModel() = default;

  /// Zero-initialised parameters with the given layer widths.
  explicit MlpModel(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
    if (dims_.size() < 2) throw ValidationError("mlp: need at least input and output widths");
    for (auto d : dims_)
      if (d == 0) throw ValidationError("mlp: layer widths must be positive");
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      layers_.push_back(Linear{Parameter(Tensor({dims_[l], dims_[l + 1]})),
                               Parameter(Tensor({dims_[l + 1]}))});
    }
  }

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t input_dim() const { return dims_.front(); }
  std::size_t output_dim() const { return dims_.back(); }
  std::size_t num_layers() const { return layers_.size(); }
  std::vector<Linear>& layers() { return layers_; }
  const std::vector<Linear>& layers() const { return layers_; }

  /// Parameters in checkpoint order: weight then bias, layer by layer.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& l : layers_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.value.size() + l.bias.value.size();
    return n;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  /// Taped forward pass: logits B x K.
  Var forward(Tape& tape, Var x) {
    check_input(x.value());
    Var h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      h = add_bias(matmul(h, tape.leaf(layers_[l].weight)), tape.leaf(layers_[l].bias));
      if (l + 1 < layers_.size()) h = relu(h);
    }
    return h;
  }

  /// Tape-free forward pass with the same arithmetic as forward().
  Tensor predict(const Tensor& x) const {
    check_input(x);
    Tensor h = x.rank() == 2 ? x : Tensor({x.rows(), x.cols()}, x.values());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& w = layers_[l].weight.value;
      const auto& b = layers_[l].bias.value;
      const std::size_t m = h.rows(), k = w.shape()[0], n = w.shape()[1];
      Tensor out({m, n});
      kernels::matmul(h.data(), w.data(), out.data(), m, k, n);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < n; ++j) {
          double v = out(r, j) + b[j];
          if (l + 1 < layers_.size()) v = v > 0.0 ? v : 0.0;
          out(r, j) = v;
        }
      h = std::move(out);
    }
    return h;
  }

  bool operator==(const MlpModel& other) const {
    if (dims_ != other.dims_) return false;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      if (!(layers_[l].weight.value == other.layers_[l].weight.value)) return false;
      if (!(layers_[l].bias.value == other.layers_[l].bias.value)) return false;
    }
    return true;
  }

 private:
  void check_input(const Tensor& x) const {
    if (x.cols() != input_dim() || (x.rank() != 1 && x.rank() != 2)) {
      throw DimensionError("mlp: input shape " + shape_str(x.shape()) +
                           " does not match feature width " + std::to_string(input_dim()));
    }
  }

  std::vector<std::size_t> dims_;
  std::vector<Linear> layers_;
};

/// Weights ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)), biases zero.
inline MlpModel init_mlp(const std::vector<std::size_t>& dims, std::uint64_t seed) {
  if (dims.empty()) throw ValidationError("init_mlp: empty layer dims");
  MlpModel m(dims);
  Rng rng(seed);
  for (auto& layer : m.layers()) {
    const double fan_in = static_cast<double>(layer.weight.value.shape()[0]);
    const double bound = std::sqrt(6.0 / fan_in);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& w : layer.weight.value.values()) w = dist(rng);
  }
  return m;
}

/// Uniform parameter-space average of same-architecture models.
inline MlpModel average_parameters(std::span<const MlpModel> models) {
  if (models.empty()) throw ValidationError("average_parameters: no models");
  MlpModel out(models.front().dims());
  for (const auto& m : models) {
    if (m.dims() != out.dims()) {
      throw DimensionError("average_parameters: architecture mismatch " +
                           shape_str(m.dims()) + " vs " + shape_str(out.dims()));
    }
  }
  const double inv = 1.0 / static_cast<double>(models.size());
  for (std::size_t l = 0; l < out.num_layers(); ++l) {
    auto& w = out.layers()[l].weight.value.values();
    auto& b = out.layers()[l].bias.value.values();
    for (const auto& m : models) {
      const auto& mw = m.layers()[l].weight.value.values();
      const auto& mb = m.layers()[l].bias.value.values();
      for (std::size_t j = 0; j < w.size(); ++j) w[j] += mw[j];
      for (std::size_t j = 0; j < b.size(); ++j) b[j] += mb[j];
    }
    for (auto& v : w) v *= inv;
    for (auto& v : b) v *= inv;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Little-endian layout:
//   "LFMECKPT"            8 bytes
//   version               u32 (= 1)
//   role length, role     u32, ASCII bytes ("target", "expert-0", "weighting")
//   layer count           u32
//   dims                  u64 x count
//   step                  u64
//   seed                  u64
//   parameters            f64 x N, per layer: weight (row-major), then bias
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 8> kCheckpointMagic{'L', 'F', 'M', 'E', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string role = "target";
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  MlpModel model;
};

namespace detail {

template <typename T>
void put_le(std::vector<char>& buf, T value) {
  std::uint64_t bits;
  if constexpr (std::is_same_v<T, double>) {
    bits = std::bit_cast<std::uint64_t>(value);
  } else {
    bits = static_cast<std::uint64_t>(value);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const char> bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    if (pos_ + sizeof(T) > bytes_.size()) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what +
                        " (payload length " + std::to_string(bytes_.size()) + " bytes)");
    }
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    if constexpr (std::is_same_v<T, double>) {
      return std::bit_cast<double>(bits);
    } else {
      return static_cast<T>(bits);
    }
  }

  std::span<const char> take(std::size_t n, const char* what) {
    if (pos_ + n > bytes_.size()) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what);
    }
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<char> buf(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le<std::uint32_t>(buf, kCheckpointVersion);
  detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(ckpt.role.size()));
  buf.insert(buf.end(), ckpt.role.begin(), ckpt.role.end());
  const auto& dims = ckpt.model.dims();
  detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) detail::put_le<std::uint64_t>(buf, d);
  detail::put_le<std::uint64_t>(buf, ckpt.step);
  detail::put_le<std::uint64_t>(buf, ckpt.seed);
  for (const auto& l : ckpt.model.layers()) {
    for (double v : l.weight.value.values()) detail::put_le<double>(buf, v);
    for (double v : l.bias.value.values()) detail::put_le<double>(buf, v);
  }
  return buf;
}

inline Checkpoint decode_checkpoint(std::span<const char> bytes) {
  detail::ByteReader in(bytes);
  auto magic = in.take(kCheckpointMagic.size(), "magic");
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic.begin())) {
    throw FormatError("not a checkpoint: bad magic bytes");
  }
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto role_len = in.get<std::uint32_t>("role length");
  auto role = in.take(role_len, "role");
  ckpt.role.assign(role.begin(), role.end());
  const auto n_dims = in.get<std::uint32_t>("dim count");
  if (n_dims < 2 || n_dims > 64) throw FormatError("checkpoint: implausible layer count " + std::to_string(n_dims));
  std::vector<std::size_t> dims;
  for (std::uint32_t i = 0; i < n_dims; ++i) dims.push_back(in.get<std::uint64_t>("dims"));
  ckpt.step = in.get<std::uint64_t>("step");
  ckpt.seed = in.get<std::uint64_t>("seed");
  // Every width is bounded by the parameter count, so a corrupt header is
  // rejected before anything is allocated from it.
  const std::size_t max_params = in.remaining() / sizeof(double);
  std::size_t count = 0;
  for (std::size_t l = 0; l < dims.size(); ++l) {
    if (dims[l] == 0 || dims[l] > max_params) {
      throw FormatError("checkpoint payload length " + std::to_string(in.remaining()) +
                        " bytes cannot hold layer width " + std::to_string(dims[l]));
    }
    if (l > 0) count += dims[l - 1] * dims[l] + dims[l];
  }
  const std::size_t expected = count * sizeof(double);
  if (in.remaining() != expected) {
    throw FormatError("checkpoint payload length " + std::to_string(in.remaining()) +
                      " bytes disagrees with dims " + shape_str(dims) + " (expected " +
                      std::to_string(expected) + ")");
  }
  MlpModel model(dims);
  for (auto& l : model.layers()) {
    for (auto& v : l.weight.value.values()) v = in.get<double>("weights");
    for (auto& v : l.bias.value.values()) v = in.get<double>("bias");
  }
  ckpt.model = std::move(model);
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace lfme

#pragma once

#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "jreg/detail/rng.hpp"
#include "jreg/model.hpp"
#include "jreg/tensor.hpp"

namespace test {

inline jreg::Tensor randn(jreg::detail::Rng& rng, jreg::Shape shape, bool grad = false, double scale = 1.0) {
  std::vector<double> v(jreg::shape_numel(shape));
  for (auto& x : v) x = rng.normal() * scale;
  return jreg::Tensor::from(std::move(shape), std::move(v), grad);
}

inline std::vector<double> randv(jreg::detail::Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal() * scale;
  return v;
}

// 2 layers, D = 8, 4 heads, |V| = 17.
inline jreg::ModelConfig tiny_config() {
  jreg::ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 4;
  c.d_ffn = 16;
  c.vocab_size = 17;
  c.max_seq_len = 16;
  return c;
}

inline jreg::TokenBatch random_batch(jreg::detail::Rng& rng, std::size_t batch, std::size_t seq, std::uint32_t vocab) {
  jreg::TokenBatch b;
  b.batch = batch;
  b.seq_len = seq;
  for (std::size_t i = 0; i < batch * seq; ++i) {
    b.tokens.push_back(static_cast<std::int32_t>(rng.below(vocab)));
    b.targets.push_back(static_cast<std::int32_t>(rng.below(vocab)));
  }
  return b;
}

// Multiplies every weight matrix by factor.
inline void scale_weights(jreg::Model& m, double factor) {
  for (auto& p : m.parameters()) {
    if (p.tensor.rank() == 2) {
      for (auto& x : p.tensor.mutable_data()) x *= factor;
    }
  }
}

inline void require_grad(jreg::Model& m) {
  for (auto& p : m.parameters()) p.tensor.set_requires_grad(true);
}

inline std::vector<jreg::Tensor> param_tensors(const jreg::Model& m) {
  std::vector<jreg::Tensor> out;
  for (auto& p : m.parameters()) out.push_back(p.tensor);
  return out;
}

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::memcmp(&a[i], &b[i], sizeof(double)) != 0) return false;
  }
  return true;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() / ("jreg_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace test

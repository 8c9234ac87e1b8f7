#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace treetrain {

enum class Precision { f32, f64 };

inline std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

inline Precision precision_from_string(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw std::invalid_argument("unknown precision: " + s);
}

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 0;
  std::size_t n_heads = 0;
  std::size_t n_layers = 0;
  std::size_t d_ff = 0;
  std::size_t max_position = 0;
  Precision precision = Precision::f64;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (vocab_size < 1 || d_model < 1 || n_heads < 1 || n_layers < 1 || d_ff < 1 ||
        max_position < 1)
      throw std::invalid_argument("ModelConfig: all counts must be >= 1");
    if (d_model % n_heads != 0)
      throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
  }
};

}  // namespace treetrain

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "ffkv/numerics/matrix.hpp"

namespace ffkv {

enum class ActivationKind { swiglu, gelu, relu };

inline std::string to_string(ActivationKind k) {
  switch (k) {
    case ActivationKind::swiglu: return "swiglu";
    case ActivationKind::gelu: return "gelu";
    case ActivationKind::relu: return "relu";
  }
  return "?";
}

inline ActivationKind activation_from_string(const std::string& s) {
  if (s == "swiglu") return ActivationKind::swiglu;
  if (s == "gelu") return ActivationKind::gelu;
  if (s == "relu") return ActivationKind::relu;
  throw Error("unknown activation kind '" + s + "'");
}

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 257;
  std::size_t context_length = 32;
  ActivationKind activation = ActivationKind::swiglu;
  bool post_ff_norm = false;
  // b_K present; defaults to true for gelu/relu, false for swiglu.
  bool ff_key_bias = false;
  std::uint64_t seed = 0;

  static ModelConfig with_activation(ActivationKind k) {
    ModelConfig c;
    c.activation = k;
    c.ff_key_bias = k != ActivationKind::swiglu;
    return c;
  }

  void validate() const {
    if (n_layers == 0) throw Error("ModelConfig: n_layers must be >= 1");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) throw Error("ModelConfig: n_heads must divide d_model");
    if (d_ff < d_model) throw Error("ModelConfig: d_ff must be >= d_model");
    if (vocab_size < 2) throw Error("ModelConfig: vocab_size must be >= 2");
    if (context_length == 0) throw Error("ModelConfig: context_length must be >= 1");
  }

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t summary_layer() const { return n_layers / 2; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},
                     {"d_model", c.d_model},
                     {"d_ff", c.d_ff},
                     {"n_heads", c.n_heads},
                     {"vocab_size", c.vocab_size},
                     {"context_length", c.context_length},
                     {"activation", to_string(c.activation)},
                     {"post_ff_norm", c.post_ff_norm},
                     {"ff_key_bias", c.ff_key_bias},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_model = j.value("d_model", d.d_model);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.context_length = j.value("context_length", d.context_length);
  c.activation = activation_from_string(j.value("activation", std::string("swiglu")));
  c.post_ff_norm = j.value("post_ff_norm", false);
  c.ff_key_bias = j.value("ff_key_bias", c.activation != ActivationKind::swiglu);
  c.seed = j.value("seed", std::uint64_t{0});
}

}  // namespace ffkv

#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "ffkv/io/container.hpp"
#include "ffkv/lm/model.hpp"
#include "ffkv/lm/tokenizer.hpp"

namespace ffkv {

inline constexpr std::string_view kModelMagic = "FFKVCKPT";

// A model checkpoint: header {kind: "lm", config, tokenizer} + one tensor per
// named parameter. Pretrained weights from elsewhere can be imported by writing
// the same tensor names with the documented row-vector layouts.
inline Container model_to_container(const Model& model, const std::optional<Tokenizer>& tokenizer = std::nullopt) {
  Container c;
  c.header["kind"] = "lm";
  c.header["config"] = model.config;
  if (tokenizer) c.header["tokenizer"] = tokenizer->to_json();
  for (const auto& t : named_tensors(model))
    c.put(t.name, Matrix(t.rows, t.cols, std::vector<float>(t.data.begin(), t.data.end())));
  return c;
}

inline Model model_from_container(const Container& c) {
  if (c.header.value("kind", std::string()) != "lm") throw Error("checkpoint is not a language model");
  Model m = zero_model(c.header.at("config").get<ModelConfig>());
  for (auto& t : named_tensors(m)) {
    const Matrix& src = c.get(t.name);
    if (src.size() != t.data.size()) throw DimensionError("checkpoint tensor '" + t.name + "' has the wrong size");
    std::copy(src.flat().begin(), src.flat().end(), t.data.begin());
  }
  return m;
}

inline void save_model(const std::filesystem::path& path, const Model& model, const std::optional<Tokenizer>& tokenizer = std::nullopt) {
  model_to_container(model, tokenizer).save(path, kModelMagic);
}

struct LoadedModel {
  Model model;
  std::optional<Tokenizer> tokenizer;
};

inline LoadedModel load_model(const std::filesystem::path& path) {
  const Container c = Container::load(path, kModelMagic);
  LoadedModel out{model_from_container(c), std::nullopt};
  if (c.header.contains("tokenizer")) out.tokenizer = Tokenizer::from_json(c.header["tokenizer"]);
  return out;
}

}  // namespace ffkv

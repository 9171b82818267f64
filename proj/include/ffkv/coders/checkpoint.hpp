#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "ffkv/coders/coder.hpp"
#include "ffkv/io/container.hpp"

namespace ffkv {

inline constexpr std::string_view kCoderMagic = "FFKVCODR";

// FF-KV coders have no weights of their own; the file only says where they live.
struct FfkvBinding {
  std::string model_path;
  std::size_t layer = 0;
  TopKConfig topk;
};

struct CoderRecord {
  CoderKind kind = CoderKind::ffkv;
  std::size_t layer = 0;
  std::optional<FfkvBinding> binding;
  std::optional<SparseCoderWeights> weights;
  nlohmann::json hyper = nlohmann::json::object();

  FeatureCoder instantiate(const Model* model = nullptr) const {
    if (binding) {
      if (!model) throw Error("coder record: an FF-KV binding needs its model");
      return FeatureCoder::ffkv(*model, binding->layer, kind, binding->topk);
    }
    return FeatureCoder::sparse(kind, *weights, layer);
  }
};

inline CoderRecord make_record(const FeatureCoder& coder, const std::string& model_path = {}, nlohmann::json hyper = nlohmann::json::object()) {
  CoderRecord r;
  r.kind = coder.kind();
  r.layer = coder.layer();
  r.hyper = std::move(hyper);
  if (is_ffkv_kind(coder.kind()))
    r.binding = FfkvBinding{model_path, coder.layer(), coder.topk()};
  else
    r.weights = *coder.sparse_weights();
  return r;
}

inline void save_coder(const std::filesystem::path& path, const CoderRecord& rec) {
  Container c;
  c.header["kind"] = to_string(rec.kind);
  c.header["layer"] = rec.layer;
  c.header["hyper"] = rec.hyper;
  if (rec.binding) {
    c.header["binding"] = {{"model_path", rec.binding->model_path}, {"layer", rec.binding->layer}, {"topk", rec.binding->topk}};
  } else {
    const auto& w = *rec.weights;
    c.header["activation"] = to_string(w.activation);
    c.header["k"] = w.k;
    c.put("w_enc", w.w_enc);
    c.put("b_enc", std::span<const float>(w.b_enc));
    c.put("w_dec", w.w_dec);
    c.put("b_dec", std::span<const float>(w.b_dec));
    if (!w.theta.empty()) c.put("theta", std::span<const float>(w.theta));
  }
  c.save(path, kCoderMagic);
}

inline CoderRecord load_coder(const std::filesystem::path& path) {
  const Container c = Container::load(path, kCoderMagic);
  CoderRecord r;
  r.kind = coder_kind_from_string(c.header.at("kind").get<std::string>());
  r.layer = c.header.value("layer", std::size_t{0});
  r.hyper = c.header.value("hyper", nlohmann::json::object());
  if (c.header.contains("binding")) {
    const auto& b = c.header["binding"];
    r.binding = FfkvBinding{b.value("model_path", std::string()), b.at("layer").get<std::size_t>(), b.at("topk").get<TopKConfig>()};
    return r;
  }
  SparseCoderWeights w;
  w.activation = sparse_activation_from_string(c.header.at("activation").get<std::string>());
  w.k = c.header.value("k", std::size_t{0});
  w.w_enc = c.get("w_enc");
  w.b_enc = c.get("b_enc").storage();
  w.w_dec = c.get("w_dec");
  w.b_dec = c.get("b_dec").storage();
  if (c.has("theta")) w.theta = c.get("theta").storage();
  w.validate();
  r.weights = std::move(w);
  return r;
}

}  // namespace ffkv

#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "ffkv/lm/model.hpp"

namespace ffkv {

// Cuts a token stream into non-overlapping context windows and runs each one.
// The callback gets (window start in the stream, window tokens, result).
inline void for_each_window(const Model& model, std::span<const int> stream, std::size_t max_tokens,
                            const std::vector<HookPoint>& hooks,
                            const std::function<void(std::size_t, std::span<const int>, const ForwardResult&)>& fn,
                            bool want_logits = false) {
  const std::size_t total = std::min(max_tokens, stream.size());
  const std::size_t ctx = model.config.context_length;
  for (std::size_t start = 0; start < total; start += ctx) {
    const auto window = stream.subspan(start, std::min(ctx, total - start));
    fn(start, window, forward_with_hooks(model, window, hooks, {}, want_logits));
  }
}

// Captured rows for the first max_tokens tokens of the stream, one row per token.
inline std::map<HookPoint, Matrix> capture_stream(const Model& model, std::span<const int> stream, const std::vector<HookPoint>& hooks,
                                                  std::size_t max_tokens) {
  const std::size_t total = std::min(max_tokens, stream.size());
  std::map<HookPoint, Matrix> out;
  for (const auto& h : hooks) out.emplace(h, Matrix(total, hook_width(model.config, h.site)));
  for_each_window(model, stream, total, hooks, [&](std::size_t start, std::span<const int>, const ForwardResult& res) {
    for (const auto& h : hooks) {
      const Matrix& src = res.captured.at(h);
      std::copy(src.flat().begin(), src.flat().end(), out.at(h).flat().begin() + static_cast<std::ptrdiff_t>(start * src.cols()));
    }
  });
  return out;
}

}  // namespace ffkv

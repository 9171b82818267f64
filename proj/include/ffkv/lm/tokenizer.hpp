#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ffkv/numerics/matrix.hpp"

namespace ffkv {

enum class TokenizerMode { byte, word };

// Byte mode: ids 0..255 are raw bytes, 256 is the document separator.
// Word mode: whitespace-split words; 0 = <eos>, 1 = <unk>, then the sorted vocabulary.
class Tokenizer {
 public:
  static constexpr const char* kEos = "<eos>";
  static constexpr const char* kUnk = "<unk>";

  static Tokenizer bytes() {
    Tokenizer t;
    t.mode_ = TokenizerMode::byte;
    return t;
  }

  template <typename Range>
  static Tokenizer words(const Range& documents) {
    std::set<std::string> vocab;
    for (const auto& doc : documents)
      for (auto& w : split_words(doc)) vocab.insert(std::move(w));
    return from_vocabulary(std::vector<std::string>(vocab.begin(), vocab.end()));
  }

  static Tokenizer from_vocabulary(std::vector<std::string> words) {
    Tokenizer t;
    t.mode_ = TokenizerMode::word;
    t.id_to_word_ = {kEos, kUnk};
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    for (auto& w : words)
      if (w != kEos && w != kUnk) t.id_to_word_.push_back(std::move(w));
    for (std::size_t i = 0; i < t.id_to_word_.size(); ++i) t.word_to_id_[t.id_to_word_[i]] = static_cast<int>(i);
    return t;
  }

  TokenizerMode mode() const { return mode_; }

  std::size_t vocab_size() const { return mode_ == TokenizerMode::byte ? 257 : id_to_word_.size(); }

  int eos() const { return mode_ == TokenizerMode::byte ? 256 : 0; }
  int unk() const { return mode_ == TokenizerMode::byte ? -1 : 1; }

  std::optional<int> id_of(const std::string& word) const {
    if (mode_ == TokenizerMode::byte) {
      if (word.size() == 1) return static_cast<unsigned char>(word[0]);
      return std::nullopt;
    }
    auto it = word_to_id_.find(word);
    if (it == word_to_id_.end()) return std::nullopt;
    return it->second;
  }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    if (mode_ == TokenizerMode::byte) {
      ids.reserve(text.size());
      for (unsigned char c : text) ids.push_back(c);
      return ids;
    }
    for (const auto& w : split_words(text)) {
      auto it = word_to_id_.find(w);
      ids.push_back(it == word_to_id_.end() ? unk() : it->second);
    }
    return ids;
  }

  std::string token_string(int id) const {
    if (mode_ == TokenizerMode::byte) {
      if (id == 256) return kEos;
      if (id < 0 || id > 256) throw Error("Tokenizer: id out of range");
      return std::string(1, static_cast<char>(id));
    }
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_word_.size()) throw Error("Tokenizer: id out of range");
    return id_to_word_[static_cast<std::size_t>(id)];
  }

  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (mode_ == TokenizerMode::word && i > 0) out += ' ';
      out += token_string(ids[i]);
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"mode", mode_ == TokenizerMode::byte ? "byte" : "word"}};
    if (mode_ == TokenizerMode::word) {
      std::vector<std::string> words(id_to_word_.begin() + 2, id_to_word_.end());
      j["vocabulary"] = words;
    }
    return j;
  }

  static Tokenizer from_json(const nlohmann::json& j) {
    const std::string mode = j.at("mode").get<std::string>();
    if (mode == "byte") return bytes();
    if (mode == "word") return from_vocabulary(j.at("vocabulary").get<std::vector<std::string>>());
    throw Error("Tokenizer: unknown mode '" + mode + "'");
  }

  static std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && is_space(text[i])) ++i;
      std::size_t j = i;
      while (j < text.size() && !is_space(text[j])) ++j;
      if (j > i) out.emplace_back(text.substr(i, j - i));
      i = j;
    }
    return out;
  }

 private:
  static bool is_space(char c) { return c == ' ' || c == '\n' || c == '\t' || c == '\r'; }

  TokenizerMode mode_ = TokenizerMode::byte;
  std::vector<std::string> id_to_word_;
  std::map<std::string, int> word_to_id_;
};

}  // namespace ffkv

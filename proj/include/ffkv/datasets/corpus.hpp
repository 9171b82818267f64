#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ffkv/io/container.hpp"
#include "ffkv/lm/tokenizer.hpp"

namespace ffkv {

struct Document {
  std::string id;
  std::string text;
  bool operator==(const Document&) const = default;
};

enum class CorpusFormat { plain, jsonl };

inline CorpusFormat corpus_format_from_string(const std::string& s) {
  if (s == "plain") return CorpusFormat::plain;
  if (s == "jsonl") return CorpusFormat::jsonl;
  throw Error("unknown corpus format '" + s + "'");
}

// Returns the byte offset of the first invalid sequence, or npos.
inline std::size_t find_invalid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t n = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xe0) == 0xc0) {
      n = 1, cp = c & 0x1f;
    } else if ((c & 0xf0) == 0xe0) {
      n = 2, cp = c & 0x0f;
    } else if ((c & 0xf8) == 0xf0) {
      n = 3, cp = c & 0x07;
    } else {
      return i;
    }
    for (std::size_t k = 1; k <= n; ++k) {
      if (i + k >= s.size()) return i;
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xc0) != 0x80) return i;
      cp = (cp << 6) | (cc & 0x3f);
    }
    // Overlong forms, surrogates and out-of-range code points.
    if ((n == 1 && cp < 0x80) || (n == 2 && cp < 0x800) || (n == 3 && cp < 0x10000) || cp > 0x10ffff || (cp >= 0xd800 && cp <= 0xdfff))
      return i;
    i += n + 1;
  }
  return std::string_view::npos;
}

inline std::size_t whitespace_token_count(const std::string& text) { return Tokenizer::split_words(text).size(); }

// Plain: one document per non-empty line, ids "line-N". JSONL: {"id", "text"}
// per line. Reading stops after the document that reaches `limit_tokens`.
inline std::vector<Document> load_corpus(const std::filesystem::path& path, CorpusFormat format,
                                         std::size_t limit_tokens = std::numeric_limits<std::size_t>::max(),
                                         const std::function<std::size_t(const std::string&)>& count_tokens = whitespace_token_count) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("load_corpus: cannot read '" + path.string() + "'");
  std::vector<Document> docs;
  std::string line;
  std::size_t line_no = 0, tokens = 0;
  while (tokens < limit_tokens && std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (const auto bad = find_invalid_utf8(line); bad != std::string_view::npos)
      throw Error("load_corpus: invalid UTF-8 on line " + std::to_string(line_no) + " at byte " + std::to_string(bad));
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    Document d;
    if (format == CorpusFormat::plain) {
      d.id = "line-" + std::to_string(line_no);
      d.text = line;
    } else {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw Error("load_corpus: malformed JSON on line " + std::to_string(line_no) + ": " + e.what());
      }
      if (!j.is_object() || !j.contains("text") || !j["text"].is_string())
        throw Error("load_corpus: line " + std::to_string(line_no) + " has no string \"text\" field");
      d.text = j["text"].get<std::string>();
      if (j.contains("id"))
        d.id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
      else
        d.id = "line-" + std::to_string(line_no);
    }
    tokens += count_tokens(d.text);
    docs.push_back(std::move(d));
  }
  return docs;
}

inline std::string corpus_fingerprint(const std::vector<Document>& docs) {
  std::string bytes;
  for (const auto& d : docs) {
    bytes += d.id;
    bytes.push_back('\0');
    bytes += d.text;
    bytes.push_back('\0');
  }
  return sha256_hex(std::string_view(bytes));
}

}  // namespace ffkv

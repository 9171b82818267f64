#pragma once

#include <array>
#include <set>
#include <string>
#include <vector>

#include "ffkv/numerics/matrix.hpp"
#include "ffkv/numerics/rng.hpp"

namespace ffkv {

struct TopicFamily {
  std::string name;
  std::vector<std::string> words;
};

// Keyword families used for concept, spurious and multi-class data.
inline const std::vector<TopicFamily>& topic_families() {
  static const std::vector<TopicFamily> families{
      {"animals", {"cat", "dog", "horse", "bird", "fish", "lion", "tiger", "sheep", "goat", "rabbit", "mouse", "eagle"}},
      {"food", {"bread", "cheese", "apple", "soup", "rice", "pasta", "butter", "honey", "salad", "pepper", "onion", "cake"}},
      {"sports", {"soccer", "tennis", "hockey", "golf", "rugby", "boxing", "skiing", "cricket", "cycling", "rowing", "sprint", "racket"}},
      {"music", {"guitar", "piano", "violin", "drum", "song", "melody", "chord", "singer", "opera", "jazz", "flute", "rhythm"}},
      {"weather", {"rain", "snow", "storm", "cloud", "thunder", "wind", "fog", "frost", "breeze", "sunshine", "hail", "drizzle"}},
      {"tools", {"hammer", "wrench", "drill", "clamp", "chisel", "pliers", "shovel", "ladder", "nail", "screw", "bolt", "rake"}},
      {"space", {"planet", "comet", "rocket", "orbit", "galaxy", "asteroid", "moon", "star", "nebula", "telescope", "astronaut", "meteor"}},
      {"medicine", {"doctor", "nurse", "fever", "vaccine", "clinic", "surgery", "tablet", "patient", "wound", "virus", "pulse", "dose"}},
      {"law", {"judge", "court", "lawyer", "verdict", "trial", "jury", "statute", "appeal", "witness", "contract", "lawsuit", "clause"}},
      {"ocean", {"wave", "coral", "tide", "reef", "shore", "harbor", "anchor", "sailor", "whale", "shark", "lagoon", "current"}},
  };
  return families;
}

// Register markers that act as the spurious channel.
inline const std::vector<TopicFamily>& style_families() {
  static const std::vector<TopicFamily> families{
      {"formal", {"indeed", "moreover", "therefore", "furthermore", "thus", "hence", "whereby", "notably", "accordingly", "consequently"}},
      {"casual", {"yeah", "gonna", "kinda", "wow", "cool", "awesome", "dude", "okay", "lol", "hey"}},
  };
  return families;
}

inline const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> words{
      "the",  "a",    "this", "that",  "some",  "many", "one",  "two",   "it",   "they",  "we",    "he",   "she",  "was",
      "is",   "are",  "saw",  "found", "liked", "made", "took", "kept",  "got",  "new",   "old",   "big",  "small", "good",
      "bad",  "quick", "slow", "near", "far",   "and",  "then", "with",  "on",   "in",    "at",    "from", "by",   "about",
      "very", "just", "also", "there", "here",  "when", "after", "before", "again", "still", "every", "day", "night", "place"};
  return words;
}

// Deterministic pronounceable pseudo-words, never repeating and never equal
// to a fixed word.
class PseudoWords {
 public:
  explicit PseudoWords(std::uint64_t seed) : rng_(seed, 0x6c657869636f6eULL) {
    for (const auto& f : topic_families()) used_.insert(f.words.begin(), f.words.end());
    for (const auto& f : style_families()) used_.insert(f.words.begin(), f.words.end());
    used_.insert(filler_words().begin(), filler_words().end());
    for (const char* w : {"has", "first", "letter", ":", ".", "of"}) used_.insert(w);
  }

  std::string next(std::size_t syllables, const std::string& prefix = "") {
    static constexpr std::array<char, 15> consonants{'b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z', 'h'};
    static constexpr std::array<char, 5> vowels{'a', 'e', 'i', 'o', 'u'};
    for (int attempt = 0; attempt < 1000; ++attempt) {
      std::string w = prefix;
      for (std::size_t s = 0; s < syllables; ++s) {
        // A consonant-final prefix supplies the first syllable's onset.
        if (s > 0 || w.empty() || is_vowel(w.back())) w.push_back(consonants[rng_.below(consonants.size())]);
        w.push_back(vowels[rng_.below(vowels.size())]);
      }
      if (used_.insert(w).second) return w;
    }
    throw Error("pseudo-word space exhausted for prefix '" + prefix + "'");
  }

  void reserve(const std::string& w) { used_.insert(w); }

 private:
  static bool is_vowel(char c) { return c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u'; }

  RngStream rng_;
  std::set<std::string> used_;
};

}  // namespace ffkv

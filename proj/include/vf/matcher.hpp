#pragma once

// Aho-Corasick automaton over the byte alphabet. Transitions are fully
// materialized (a DFA), so a scan is one table lookup per input byte plus one
// step per reported match.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace vf {

struct Match {
  std::size_t pattern;  // index into Matcher::patterns()
  std::size_t begin;    // byte offset of the first matched byte
  bool operator==(const Match&) const = default;
  auto operator<=>(const Match&) const = default;
};

class Matcher {
 public:
  // Patterns must be non-empty and distinct (Pattern error otherwise).
  explicit Matcher(std::vector<std::string> patterns);

  const std::vector<std::string>& patterns() const noexcept { return patterns_; }

  // Calls on_match(Match) for every occurrence, overlaps included, in order
  // of match end offset; longer patterns first for a shared end.
  template <typename F>
  void scan(std::string_view text, F&& on_match) const {
    std::int32_t state = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
      state = nodes_[state].next[static_cast<unsigned char>(text[i])];
      for (std::int32_t s = nodes_[state].pattern >= 0 ? state : nodes_[state].output; s > 0;
           s = nodes_[s].output) {
        const auto p = static_cast<std::size_t>(nodes_[s].pattern);
        on_match(Match{p, i + 1 - patterns_[p].size()});
      }
    }
  }

  std::vector<Match> find_all(std::string_view text) const;

 private:
  struct Node {
    std::array<std::int32_t, 256> next;
    std::int32_t fail = 0;
    std::int32_t output = 0;  // nearest proper suffix node that ends a pattern, 0 if none
    std::int32_t pattern = -1;
  };

  std::vector<std::string> patterns_;
  std::vector<Node> nodes_;
};

}  // namespace vf

#include "vf/matcher.hpp"

#include <queue>
#include <unordered_set>

#include "vf/error.hpp"

namespace vf {

Matcher::Matcher(std::vector<std::string> patterns) : patterns_(std::move(patterns)) {
  if (patterns_.empty()) throw Error(ErrorKind::Pattern, "matcher needs at least one pattern");
  std::unordered_set<std::string_view> seen;
  for (const auto& p : patterns_) {
    if (p.empty()) throw Error(ErrorKind::Pattern, "empty pattern");
    if (!seen.insert(p).second) throw Error(ErrorKind::Pattern, "duplicate pattern '" + p + "'");
  }

  auto new_node = [this] {
    Node n;
    n.next.fill(-1);
    nodes_.push_back(n);
    return static_cast<std::int32_t>(nodes_.size() - 1);
  };
  new_node();

  for (std::size_t p = 0; p < patterns_.size(); ++p) {
    std::int32_t cur = 0;
    for (unsigned char c : patterns_[p]) {
      if (nodes_[cur].next[c] < 0) {
        const auto child = new_node();
        nodes_[cur].next[c] = child;
      }
      cur = nodes_[cur].next[c];
    }
    nodes_[cur].pattern = static_cast<std::int32_t>(p);
  }

  // Breadth-first: fail links, output links, and the completed DFA.
  std::queue<std::int32_t> queue;
  for (auto& t : nodes_[0].next) {
    if (t < 0) {
      t = 0;
    } else {
      nodes_[t].fail = 0;
      nodes_[t].output = 0;
      queue.push(t);
    }
  }
  while (!queue.empty()) {
    const auto u = queue.front();
    queue.pop();
    for (int c = 0; c < 256; ++c) {
      const auto v = nodes_[u].next[c];
      const auto via_fail = nodes_[nodes_[u].fail].next[c];
      if (v < 0) {
        nodes_[u].next[c] = via_fail;
        continue;
      }
      nodes_[v].fail = via_fail;
      nodes_[v].output = nodes_[via_fail].pattern >= 0 ? via_fail : nodes_[via_fail].output;
      queue.push(v);
    }
  }
}

std::vector<Match> Matcher::find_all(std::string_view text) const {
  std::vector<Match> out;
  scan(text, [&](const Match& m) { out.push_back(m); });
  return out;
}

}  // namespace vf

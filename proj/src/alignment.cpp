#include "vf/alignment.hpp"

#include <algorithm>

#include "vf/error.hpp"

namespace vf {

namespace {

struct Spans {
  std::vector<std::size_t> begin, end;
};

Spans byte_spans(std::span<const TokenId> ids, const ExtendedVocab& vocab, std::string& text) {
  Spans s;
  for (TokenId id : ids) {
    s.begin.push_back(text.size());
    text += vocab.token_bytes(id);
    s.end.push_back(text.size());
  }
  return s;
}

}  // namespace

AlignmentMap align(std::span<const TokenId> s_tau, std::span<const TokenId> s_star,
                   const ExtendedVocab& vocab, const AlignOptions& opts) {
  std::string text_tau, text_star;
  const Spans a = byte_spans(s_tau, vocab, text_tau);
  const Spans b = byte_spans(s_star, vocab, text_star);
  if (text_tau != text_star)
    throw Error(ErrorKind::Alignment, "sequences decode to different bytes");

  AlignmentMap map;
  for (std::size_t i = 0; i < s_star.size(); ++i) {
    if (!vocab.is_added(s_star[i])) continue;
    Occurrence occ{i, s_star[i], s_tau.size(), 0};
    for (std::size_t j = 0; j < s_tau.size(); ++j) {
      if (a.begin[j] < b.end[i] && a.end[j] > b.begin[i]) {
        occ.span_begin = std::min(occ.span_begin, j);
        occ.span_end = j + 1;
      }
    }
    if (occ.span_end == 0) occ.span_begin = 0;
    map.occurrences.push_back(occ);
  }
  if (map.occurrences.empty()) return map;
  const std::size_t first = map.occurrences.front().position;

  std::size_t i = 0, j = 0;
  while (i < s_star.size() && j < s_tau.size()) {
    if (b.begin[i] == a.begin[j] && b.end[i] == a.end[j]) {
      if (i > first && s_star[i] == s_tau[j] && !vocab.is_added(s_star[i]))
        map.pairs.push_back({i, j});
      ++i;
      ++j;
    } else if (b.end[i] < a.end[j]) {
      ++i;
    } else if (a.end[j] < b.end[i]) {
      ++j;
    } else {
      ++i;
      ++j;
    }
  }

  if (opts.supervise_span_end) {
    for (const auto& occ : map.occurrences)
      if (occ.span_end > occ.span_begin) map.pairs.push_back({occ.position, occ.span_end - 1});
    std::sort(map.pairs.begin(), map.pairs.end());
  }
  return map;
}

nlohmann::ordered_json AlignmentMap::to_json(const ExtendedVocab& vocab, std::string_view text) const {
  nlohmann::ordered_json j;
  j["text"] = std::string(text);
  auto pj = nlohmann::ordered_json::array();
  for (const auto& p : pairs) pj.push_back({p.i, p.j});
  j["pairs"] = std::move(pj);
  auto sj = nlohmann::ordered_json::array();
  for (const auto& o : occurrences) {
    nlohmann::ordered_json e;
    e["position"] = o.position;
    e["id"] = o.id;
    e["string"] = vocab.token_bytes(o.id);
    e["subtokens"] = {o.span_begin, o.span_end};
    sj.push_back(std::move(e));
  }
  j["spans"] = std::move(sj);
  return j;
}

}  // namespace vf

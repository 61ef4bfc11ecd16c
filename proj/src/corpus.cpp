#include "vf/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include "vf/error.hpp"
#include "vf/rng.hpp"

namespace vf {

const char* to_string(Provenance p) noexcept {
  return p == Provenance::Retrieved ? "retrieved" : "generated";
}

bool SnippetSet::add(Snippet s) {
  auto& list = by_target[s.target];
  if (list.size() >= cap) return false;
  list.push_back(std::move(s));
  return true;
}

std::size_t SnippetSet::total() const {
  std::size_t n = 0;
  for (const auto& [_, list] : by_target) n += list.size();
  return n;
}

std::vector<Snippet> SnippetSet::flatten() const {
  std::vector<Snippet> out;
  for (const auto& [_, list] : by_target) out.insert(out.end(), list.begin(), list.end());
  return out;
}

void write_snippets_jsonl(const SnippetSet& set, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Input, "cannot write " + path.string());
  for (const auto& [target, list] : set.by_target) {
    for (const auto& s : list) {
      nlohmann::ordered_json j;
      j["target"] = s.target;
      j["text"] = s.text;
      j["span"] = {s.span_begin, s.span_end};
      j["provenance"] = to_string(s.provenance);
      j["doc_id"] = s.doc_id ? nlohmann::ordered_json(*s.doc_id) : nlohmann::ordered_json(nullptr);
      try {
        out << j.dump() << '\n';
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::Format, std::string("snippet is not valid UTF-8: ") + e.what());
      }
    }
  }
}

SnippetSet read_snippets_jsonl(const std::filesystem::path& path, std::size_t cap) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Input, "cannot read " + path.string());
  SnippetSet set;
  set.cap = cap;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      Snippet s;
      s.target = j.at("target").get<std::string>();
      s.text = j.at("text").get<std::string>();
      s.span_begin = j.at("span").at(0).get<std::size_t>();
      s.span_end = j.at("span").at(1).get<std::size_t>();
      const auto prov = j.at("provenance").get<std::string>();
      if (prov != "retrieved" && prov != "generated")
        throw Error(ErrorKind::Format, "unknown provenance '" + prov + "'");
      s.provenance = prov == "retrieved" ? Provenance::Retrieved : Provenance::Generated;
      if (j.contains("doc_id") && !j["doc_id"].is_null()) s.doc_id = j["doc_id"].get<std::size_t>();
      if (s.span_end < s.span_begin || s.span_end > s.text.size() ||
          s.text.compare(s.span_begin, s.span_end - s.span_begin, s.target) != 0)
        throw Error(ErrorKind::Format, "snippet span does not hold its target");
      set.add(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Format, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return set;
}

std::vector<std::string> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Input, "cannot read " + path.string());
  const bool jsonl = path.extension() == ".jsonl";
  std::vector<std::string> docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!jsonl) {
      docs.push_back(std::move(line));
      continue;
    }
    try {
      docs.push_back(nlohmann::json::parse(line).at("text").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Format, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return docs;
}

namespace {

std::vector<bool> boundary_mask(std::string_view text) {
  std::vector<bool> mask(text.size() + 1, false);
  for (const Piece& p : split_pieces(text)) mask[p.begin] = true;
  mask[text.size()] = true;
  return mask;
}

}  // namespace

std::optional<Snippet> make_window(const std::string& doc, std::size_t begin, std::size_t end,
                                   const Vocab& vocab, std::size_t window_tokens) {
  const Encoding enc = vocab.encode_with_offsets(doc);
  const std::size_t ntok = enc.ids.size();
  auto first = std::lower_bound(enc.offsets.begin(), enc.offsets.end(), begin);
  auto last = std::lower_bound(enc.offsets.begin(), enc.offsets.end(), end);
  if (first == enc.offsets.end() || *first != begin) return std::nullopt;
  const auto ts = static_cast<std::size_t>(first - enc.offsets.begin());
  const auto te = static_cast<std::size_t>(last - enc.offsets.begin());
  const std::size_t span_tokens = te - ts;
  if (window_tokens < span_tokens + 2)
    throw Error(ErrorKind::Usage, "window of " + std::to_string(window_tokens) +
                                      " tokens cannot hold a " + std::to_string(span_tokens) +
                                      "-token target with context");

  const std::size_t budget = window_tokens - span_tokens;
  std::size_t right = std::min(ntok - te, budget - std::min(ts, budget / 2));
  std::size_t left = std::min(ts, budget - right);

  auto byte_end = [&](std::size_t tok) { return tok == ntok ? doc.size() : enc.offsets[tok]; };
  for (;;) {
    const std::size_t wb = enc.offsets[ts - left];
    const std::size_t we = byte_end(te + right);
    std::string text = doc.substr(wb, we - wb);
    if (vocab.encode(text).size() <= window_tokens) {
      Snippet s;
      s.text = std::move(text);
      s.span_begin = begin - wb;
      s.span_end = end - wb;
      s.target = doc.substr(begin, end - begin);
      const auto mask = boundary_mask(s.text);
      if (!mask[s.span_begin] || !mask[s.span_end]) return std::nullopt;
      return s;
    }
    // Re-tokenizing a cut window can cost extra tokens at the edges.
    if (right >= left && right > 0) {
      --right;
    } else if (left > 1) {
      --left;
    } else if (right > 0) {
      --right;
    } else if (left > 0) {
      --left;
    } else {
      return std::nullopt;
    }
  }
}

SnippetSet retrieve_snippets(const std::vector<std::string>& documents,
                             const std::vector<std::string>& targets, const Vocab& vocab,
                             const RetrievalOptions& opts) {
  const Matcher matcher(targets);
  struct Hit {
    std::size_t doc;
    std::size_t begin;
  };
  struct Reservoir {
    std::vector<Hit> kept;
    std::size_t seen = 0;
    Rng rng{0};
  };
  std::vector<Reservoir> reservoirs(targets.size());
  for (std::size_t t = 0; t < targets.size(); ++t)
    reservoirs[t].rng = Rng(derive_seed(opts.seed, "retrieve:" + targets[t]));

  for (std::size_t d = 0; d < documents.size(); ++d) {
    const std::string& doc = documents[d];
    std::vector<bool> mask;
    matcher.scan(doc, [&](const Match& m) {
      if (mask.empty()) mask = boundary_mask(doc);
      const auto end = m.begin + targets[m.pattern].size();
      if (!mask[m.begin] || !mask[end]) return;
      auto& r = reservoirs[m.pattern];
      if (r.kept.size() < opts.n_per_target) {
        r.kept.push_back({d, m.begin});
      } else {
        const auto j = r.rng.below(r.seen + 1);
        if (j < opts.n_per_target) r.kept[j] = {d, m.begin};
      }
      ++r.seen;
    });
  }

  SnippetSet set;
  set.cap = opts.n_per_target;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    auto& r = reservoirs[t];
    std::sort(r.kept.begin(), r.kept.end(), [](const Hit& a, const Hit& b) {
      return std::tie(a.doc, a.begin) < std::tie(b.doc, b.begin);
    });
    auto& list = set.by_target[targets[t]];
    for (const Hit& h : r.kept) {
      auto s = make_window(documents[h.doc], h.begin, h.begin + targets[t].size(), vocab,
                           opts.window_tokens);
      if (!s) continue;
      s->doc_id = h.doc;
      list.push_back(std::move(*s));
    }
    if (list.size() < opts.n_per_target) set.deficits[targets[t]] = list.size();
  }
  return set;
}

std::pair<SnippetSet, SnippetSet> split_snippets(const SnippetSet& set, double heldout_fraction,
                                                 std::uint64_t seed) {
  SnippetSet train, heldout;
  train.cap = heldout.cap = set.cap;
  for (const auto& [target, list] : set.by_target) {
    auto shuffled = list;
    Rng rng(derive_seed(seed, "split:" + target));
    rng.shuffle(shuffled.begin(), shuffled.end());
    const auto n_held = static_cast<std::size_t>(std::ceil(heldout_fraction * shuffled.size()));
    const auto n_train = shuffled.size() - std::min(n_held, shuffled.size());
    auto& tr = train.by_target[target];
    auto& ho = heldout.by_target[target];
    tr.assign(shuffled.begin(), shuffled.begin() + n_train);
    ho.assign(shuffled.begin() + n_train, shuffled.end());
  }
  return {std::move(train), std::move(heldout)};
}

}  // namespace vf

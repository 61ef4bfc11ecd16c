#include "vf/eval.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "vf/error.hpp"
#include "vf/rng.hpp"

namespace vf {

std::string Report::config_digest() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(config.dump())));
  return buf;
}

nlohmann::ordered_json Report::to_json() const {
  nlohmann::ordered_json j;
  j["kind"] = kind;
  j["tool_version"] = kToolVersion;
  j["seed"] = seed;
  j["config_digest"] = config_digest();
  j["config"] = config;
  j["rows"] = rows;
  j["aggregate"] = aggregate;
  j["notes"] = notes;
  return j;
}

void Report::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Input, "cannot write " + path.string());
  out << to_json().dump(2) << '\n';
}

std::string Report::to_tsv() const {
  std::string out;
  if (rows.empty()) return out;
  std::vector<std::string> keys;
  for (const auto& [k, v] : rows.front().items()) keys.push_back(k);
  for (std::size_t k = 0; k < keys.size(); ++k) out += (k ? "\t" : "") + keys[k];
  out += '\n';
  for (const auto& r : rows) {
    for (std::size_t k = 0; k < keys.size(); ++k) {
      const auto& v = r.at(keys[k]);
      out += k ? "\t" : "";
      out += v.is_string() ? v.get<std::string>() : v.dump();
    }
    out += '\n';
  }
  return out;
}

MeanStd mean_std(std::span<const double> v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  for (double x : v) r.std += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(r.std / static_cast<double>(v.size()));
  return r;
}

std::size_t levenshtein(std::span<const TokenId> a, std::span<const TokenId> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

Report compression_report(std::span<const std::string> texts, const Vocab& base,
                          const ExtendedVocab& extended) {
  Report r;
  r.kind = "compression";
  r.config = {{"texts", texts.size()}, {"added_tokens", extended.added().size()}};
  double sum_delta = 0, sq = 0, sq_star = 0;
  std::size_t total = 0, total_star = 0;
  for (std::size_t k = 0; k < texts.size(); ++k) {
    const auto n = base.encode(texts[k]).size();
    const auto n_star = extended.encode(texts[k]).size();
    const double delta = n == 0 ? 0.0 : 100.0 * (static_cast<double>(n_star) - static_cast<double>(n)) /
                                            static_cast<double>(n);
    r.rows.push_back({{"text", k}, {"tokens", n}, {"tokens_extended", n_star}, {"delta_pct", delta}});
    sum_delta += delta;
    total += n;
    total_star += n_star;
    sq += static_cast<double>(n) * static_cast<double>(n);
    sq_star += static_cast<double>(n_star) * static_cast<double>(n_star);
  }
  r.aggregate = {{"texts", texts.size()},
                 {"tokens", total},
                 {"tokens_extended", total_star},
                 {"mean_delta_pct", texts.empty() ? 0.0 : sum_delta / static_cast<double>(texts.size())},
                 {"quadratic_ratio", sq == 0 ? 1.0 : sq_star / sq}};
  return r;
}

template <typename T>
Report fidelity_report(const Weights<T>& w, const ExtendedVocab& vocab, const NewTokenTable& table,
                       const SnippetSet& heldout, std::size_t tap) {
  const std::size_t L = w.config.n_layers;
  if (tap == kFullDepth) tap = L;
  Report r;
  r.kind = "fidelity";
  r.config = {{"tap_layer", tap},
              {"output_mode", to_string(table.output_mode)},
              {"tokens", table.size()},
              {"heldout_snippets", heldout.total()}};
  const auto metrics = evaluate_snippets(w, vocab, table, heldout, tap);
  std::map<std::string, std::vector<const SnippetMetrics*>> by;
  for (const auto& m : metrics)
    if (m.td) by[m.target].push_back(&m);
  std::vector<double> tds, kls;
  for (const auto& tok : table.tokens) {
    auto it = by.find(tok.text);
    if (it == by.end()) {
      r.notes.push_back("no held-out snippet for '" + tok.text + "'");
      continue;
    }
    double td = 0, kl = 0;
    for (const auto* m : it->second) td += *m->td, kl += *m->kl;
    td /= static_cast<double>(it->second.size());
    kl /= static_cast<double>(it->second.size());
    r.rows.push_back({{"token", tok.text}, {"snippets", it->second.size()}, {"td", td}, {"kl", kl}});
    tds.push_back(td);
    kls.push_back(kl);
  }
  const auto a = mean_std(tds), b = mean_std(kls);
  r.aggregate = {{"tokens", tds.size()}, {"td_mean", a.mean}, {"td_std", a.std},
                 {"kl_mean", b.mean},    {"kl_std", b.std}};
  return r;
}

template <typename T>
Report recovery_test(const Weights<T>& w, const Vocab& base, const std::string& token,
                     const SnippetSet& snippets, const TrainConfig& cfg, const RecoveryOptions& opts) {
  const auto id = base.find(token);
  if (!id || base.is_special(*id))
    throw Error(ErrorKind::Usage, "recovery needs a string that is one base token: '" + token + "'");
  const std::vector<std::string> one{token};
  const auto ev = ExtendedVocab::extend(base, one, true);
  const std::size_t d = w.config.d_model, tap = cfg.objective.tap(w.config.n_layers);
  const auto [train, held] = split_snippets(snippets, opts.heldout_fraction, opts.seed);

  auto mean_td = [&](const NewTokenTable& t, double* kl) {
    const auto m = evaluate_snippets(w, ev, t, held, tap);
    double s = 0, k = 0;
    std::size_t n = 0;
    for (const auto& x : m)
      if (x.td) s += *x.td, k += *x.kl, ++n;
    if (n == 0) throw Error(ErrorKind::Input, "no usable held-out snippet for '" + token + "'");
    if (kl) *kl = k / static_cast<double>(n);
    return s / static_cast<double>(n);
  };

  auto random = NewTokenTable::blank(ev, d, cfg.objective.output_mode);
  random.in_emb = init_random(w.in_emb, 1, opts.seed).template cast<float>();
  random.tokens[0].init = "random";
  const double baseline = mean_td(random, nullptr);

  NewTokenTable start = random;
  if (opts.start) {
    if (opts.start->size() != d) throw Error(ErrorKind::Dimension, "starting row has the wrong width");
    std::copy(opts.start->begin(), opts.start->end(), start.in_emb.row(0).begin());
    start.tokens[0].init = "given";
  }
  TrainConfig c = cfg;
  c.objective.kind = ObjectiveKind::TD;
  c.objective.combine = Combine::None;
  const auto res = train_embeddings(w, ev, train, start, c);
  double kl = 0;
  const double final_td = mean_td(res.table, &kl);

  double dot = 0, na = 0, nb = 0;
  const auto row = res.table.in_emb.row(0);
  for (std::size_t k = 0; k < d; ++k) {
    const double a = row[k], b = static_cast<double>(w.in_emb(static_cast<std::size_t>(*id), k));
    dot += a * b;
    na += a * a;
    nb += b * b;
  }
  const double cosine = na == 0 || nb == 0 ? 0.0 : std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
  const bool pass = final_td <= opts.pass_ratio * baseline;

  Report r;
  r.kind = "recovery";
  r.seed = opts.seed;
  r.config = cfg.to_json();
  r.config["token"] = token;
  r.config["heldout_fraction"] = opts.heldout_fraction;
  r.config["pass_ratio"] = opts.pass_ratio;
  r.config["start"] = opts.start ? "given" : "random";
  r.rows.push_back({{"token", token},
                    {"steps", res.log.size()},
                    {"baseline_td", baseline},
                    {"final_td", final_td},
                    {"final_kl", kl},
                    {"cosine", cosine},
                    {"pass", pass}});
  r.aggregate = {{"pass", pass}, {"ratio", baseline == 0 ? 0.0 : final_td / baseline}};
  return r;
}

template <typename T>
Report definition_diff(const Weights<T>& w, const ExtendedVocab& vocab, const NewTokenTable& table,
                       const std::vector<std::string>& tokens, std::size_t max_new,
                       const std::string& prompt_template) {
  const auto slot = prompt_template.find("{token}");
  if (slot == std::string::npos) throw Error(ErrorKind::Usage, "prompt template lacks {token}");
  const Vocab& base = vocab.base();
  TableView<T> rows(table);
  Report r;
  r.kind = "definitions";
  r.config = {{"template", prompt_template},
              {"max_new", max_new},
              {"output_mode", to_string(table.output_mode)}};
  std::vector<double> dists, prefixes;
  for (const auto& tok : tokens) {
    if (!vocab.find_added(tok)) throw Error(ErrorKind::Usage, "'" + tok + "' is not an added token");
    std::string prompt = prompt_template;
    prompt.replace(slot, 7, tok);
    std::vector<TokenId> a{base.bos()}, b{base.bos()};
    for (TokenId t : base.encode(prompt)) a.push_back(t);
    for (TokenId t : vocab.encode(prompt)) b.push_back(t);
    const auto ga = generate(w, a, max_new, Sampling{}, OutputMode::Exclude);
    const auto gb = generate(w, b, max_new, Sampling{}, table.output_mode, rows.rows());
    const std::string ta = vocab.decode(std::span(ga).subspan(a.size()));
    const std::string tb = vocab.decode(std::span(gb).subspan(b.size()));
    const auto ia = base.encode(ta), ib = base.encode(tb);
    std::size_t prefix = 0;
    while (prefix < ia.size() && prefix < ib.size() && ia[prefix] == ib[prefix]) ++prefix;
    const auto longer = std::max(ia.size(), ib.size());
    const double dist = longer == 0 ? 0.0 : static_cast<double>(levenshtein(ia, ib)) / static_cast<double>(longer);
    r.rows.push_back({{"token", tok},
                      {"continuation_base", ta},
                      {"continuation_new", tb},
                      {"prefix", prefix},
                      {"length", longer},
                      {"edit_distance", dist}});
    dists.push_back(dist);
    prefixes.push_back(static_cast<double>(prefix));
  }
  const auto a = mean_std(dists), p = mean_std(prefixes);
  r.aggregate = {{"tokens", tokens.size()},
                 {"edit_distance_mean", a.mean},
                 {"edit_distance_std", a.std},
                 {"prefix_mean", p.mean}};
  return r;
}

#define VF_INSTANTIATE(T)                                                                          \
  template Report fidelity_report(const Weights<T>&, const ExtendedVocab&, const NewTokenTable&,  \
                                  const SnippetSet&, std::size_t);                                \
  template Report recovery_test(const Weights<T>&, const Vocab&, const std::string&,              \
                                const SnippetSet&, const TrainConfig&, const RecoveryOptions&);   \
  template Report definition_diff(const Weights<T>&, const ExtendedVocab&, const NewTokenTable&,  \
                                  const std::vector<std::string>&, std::size_t, const std::string&);

VF_INSTANTIATE(float)
VF_INSTANTIATE(double)

}  // namespace vf

#include "vf/fixture.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "vf/corpus.hpp"
#include "vf/error.hpp"
#include "vf/rng.hpp"

namespace vf {

namespace {

const std::vector<std::string> kOnsets = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r",
                                          "s", "t", "v", "z", "br", "dr", "gl", "kr", "pl",
                                          "st", "tr", "sh", "th", "qu"};
const std::vector<std::string> kNuclei = {"a", "e", "i", "o", "u", "ai", "ou", "ee"};
const std::vector<std::string> kCodas = {"", "", "", "n", "r", "l", "s", "m", "th"};

std::string syllable(Rng& rng) {
  return kOnsets[rng.below(kOnsets.size())] + kNuclei[rng.below(kNuclei.size())] +
         kCodas[rng.below(kCodas.size())];
}

std::size_t zipf(Rng& rng, const std::vector<double>& cdf) {
  const double u = rng.uniform() * cdf.back();
  return static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorKind::Input, "cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_lines(const std::filesystem::path& p, const std::vector<std::string>& lines) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error(ErrorKind::Input, "cannot write " + p.string());
  for (const auto& l : lines) out << l << '\n';
}

nlohmann::ordered_json describe(const FixtureConfig& cfg) {
  return {{"seed", cfg.seed},
          {"train_docs", cfg.train_docs},
          {"eval_docs", cfg.eval_docs},
          {"vocab_size", cfg.vocab_size},
          {"model", cfg.model.to_json()},
          {"pretrain",
           {{"steps", cfg.pretrain.steps},
            {"batch", cfg.pretrain.batch},
            {"seq_len", cfg.pretrain.seq_len},
            {"lr", cfg.pretrain.lr},
            {"warmup", cfg.pretrain.warmup},
            {"weight_decay", cfg.pretrain.weight_decay},
            {"grad_clip", cfg.pretrain.grad_clip},
            {"seed", cfg.pretrain.seed}}}};
}

}  // namespace

Lexicon Lexicon::generate(std::uint64_t seed, std::size_t n_nouns) {
  Lexicon lex;
  lex.colours = {"red", "blue", "green", "gold", "grey", "pink", "black", "white"};
  lex.homes = {"marsh", "forest", "river", "cave", "valley", "desert", "harbor", "meadow", "tower", "island"};
  lex.foods = {"bread", "fish", "seeds", "honey", "apples", "roots", "berries", "grain"};
  lex.verbs = {"sees", "follows", "meets", "helps", "finds", "watches", "greets", "avoids"};
  std::set<std::string> taken{"the", "a", "is", "and", "near", "from", "eats", "lives", "every",
                              "likes", "its", "home"};
  for (const auto* list : {&lex.colours, &lex.homes, &lex.foods, &lex.verbs})
    taken.insert(list->begin(), list->end());
  Rng rng(derive_seed(seed, "fixture:lexicon"));
  while (lex.nouns.size() < n_nouns) {
    std::string w;
    for (std::size_t s = 0, n = 2 + rng.below(2); s < n; ++s) w += syllable(rng);
    if (w.size() < 5 || !taken.insert(w).second) continue;
    lex.nouns.push_back({w, rng.below(lex.colours.size()), rng.below(lex.homes.size()),
                         rng.below(lex.foods.size())});
  }
  return lex;
}

std::vector<std::string> synthetic_corpus(const Lexicon& lex, std::size_t n_docs, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> cdf;
  double acc = 0;
  for (std::size_t r = 0; r < lex.nouns.size(); ++r) cdf.push_back(acc += 1.0 / static_cast<double>(r + 1));
  auto pick = [&](const std::vector<std::string>& v) -> const std::string& { return v[rng.below(v.size())]; };

  std::vector<std::string> docs;
  docs.reserve(n_docs);
  for (std::size_t d = 0; d < n_docs; ++d) {
    std::string doc;
    // A document mostly talks about one noun.
    const auto& topic = lex.nouns[zipf(rng, cdf)];
    for (std::size_t s = 0, n = 3 + rng.below(6); s < n; ++s) {
      const auto& a = rng.below(3) ? topic : lex.nouns[zipf(rng, cdf)];
      const auto& b = lex.nouns[zipf(rng, cdf)];
      const auto& colour = lex.colours[a.colour];
      const auto& home = lex.homes[a.home];
      const auto& food = lex.foods[a.food];
      std::string sentence;
      switch (rng.below(6)) {
        case 0: sentence = "the " + a.word + " is " + colour + "."; break;
        case 1: sentence = "a " + colour + " " + a.word + " lives near the " + home + "."; break;
        case 2: sentence = "the " + a.word + " from the " + home + " eats " + food + "."; break;
        case 3:
          sentence = "the " + a.word + " " + pick(lex.verbs) + " the " + b.word + ", and the " +
                     a.word + " eats " + food + ".";
          break;
        case 4: sentence = "every " + a.word + " likes " + food + " and is " + colour + "."; break;
        default:
          sentence = "near the " + home + " the " + a.word + " " + pick(lex.verbs) + " a " +
                     lex.colours[b.colour] + " " + b.word + ".";
          break;
      }
      if (!doc.empty()) doc += ' ';
      doc += sentence;
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

std::vector<TokenId> token_stream(std::span<const std::string> docs, const Vocab& vocab) {
  std::vector<TokenId> out;
  for (const auto& d : docs) {
    out.push_back(vocab.bos());
    for (TokenId t : vocab.encode(d)) out.push_back(t);
  }
  return out;
}

Fixture build_fixture(const FixtureConfig& cfg, bool verbose) {
  Fixture f;
  f.lexicon = Lexicon::generate(cfg.seed);
  f.train_corpus = synthetic_corpus(f.lexicon, cfg.train_docs, derive_seed(cfg.seed, "fixture:train"));
  f.eval_corpus = synthetic_corpus(f.lexicon, cfg.eval_docs, derive_seed(cfg.seed, "fixture:eval"));
  f.vocab = train_bpe(f.train_corpus, cfg.vocab_size);
  ModelConfig mc = cfg.model;
  mc.vocab_size = f.vocab.size();
  const auto stream = token_stream(f.train_corpus, f.vocab);
  if (verbose)
    std::cerr << "fixture: " << stream.size() << " training tokens, vocab " << f.vocab.size() << '\n';
  PretrainOptions po = cfg.pretrain;
  po.seed = derive_seed(cfg.seed, "fixture:pretrain");
  auto res = pretrain_fixture(mc, stream, po, [&](std::size_t step, double loss) {
    if (verbose && (step % 100 == 0 || step + 1 == po.steps))
      std::cerr << "pretrain step " << step << " loss " << loss << '\n';
  });
  f.weights = std::move(res.weights);
  f.pretrain_losses = std::move(res.losses);
  return f;
}

Fixture load_or_build_fixture(const std::filesystem::path& dir, const FixtureConfig& cfg, bool verbose) {
  const auto stamp = describe(cfg).dump();
  const auto meta = dir / "fixture.json";
  if (std::filesystem::exists(meta) && read_text(meta) == stamp + "\n") {
    Fixture f;
    f.lexicon = Lexicon::generate(cfg.seed);
    f.train_corpus = read_corpus(dir / "corpus.txt");
    f.eval_corpus = read_corpus(dir / "eval.txt");
    f.vocab = Vocab::from_json(nlohmann::json::parse(read_text(dir / "vocab.json")));
    f.weights = load_checkpoint(dir / "model.vfck");
    std::istringstream losses(read_text(dir / "pretrain_loss.txt"));
    for (double v; losses >> v;) f.pretrain_losses.push_back(v);
    return f;
  }
  Fixture f = build_fixture(cfg, verbose);
  std::filesystem::create_directories(dir);
  write_lines(dir / "corpus.txt", f.train_corpus);
  write_lines(dir / "eval.txt", f.eval_corpus);
  {
    std::ofstream out(dir / "vocab.json");
    out << f.vocab.to_json().dump() << '\n';
  }
  save_checkpoint(f.weights, dir / "model.vfck");
  {
    std::ofstream out(dir / "pretrain_loss.txt");
    out.precision(17);
    for (double v : f.pretrain_losses) out << v << '\n';
  }
  std::ofstream(meta) << stamp << '\n';
  return f;
}

}  // namespace vf

// Command-line front end. Every subcommand reads its inputs from files and
// writes one artifact to --out (generate prints to stdout).

#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "vf/error.hpp"
#include "vf/eval.hpp"
#include "vf/fixture.hpp"
#include "vf/rng.hpp"
#include "vf/trainer.hpp"

using namespace vf;

namespace {

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  bool f64 = false;
  std::string out;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Input, "cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const std::string& path) {
  try {
    return nlohmann::json::parse(slurp(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Input, "cannot write " + path);
  out << text;
}

const std::string& require_out(const Globals& g) {
  if (g.out.empty()) throw Error(ErrorKind::Usage, "--out is required");
  return g.out;
}

// The config file is either a bare training config or an object with
// "train" and/or "continued" sections.
nlohmann::json config_section(const Globals& g, const char* name) {
  if (g.config.empty()) return nlohmann::json::object();
  const auto j = read_json(g.config);
  if (!j.is_object()) throw Error(ErrorKind::Config, "config file must hold a JSON object");
  const bool sectioned = j.contains("train") || j.contains("continued");
  if (!sectioned) return std::string(name) == "train" ? j : nlohmann::json::object();
  return j.value(name, nlohmann::json::object());
}

ExtendedVocab load_ext(const std::string& path) { return ExtendedVocab::from_json(read_json(path)); }
Vocab load_base(const std::string& path) { return Vocab::from_json(read_json(path)); }

std::vector<std::string> load_strings(const std::string& path) {
  const auto j = read_json(path);
  if (!j.is_array()) throw Error(ErrorKind::Format, path + ": expected a JSON array of strings");
  try {
    return j.get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, path + ": " + e.what());
  }
}

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw Error(ErrorKind::Usage, "bad learning rate '" + item + "'");
    }
  }
  return out;
}

// Runs `f` with float or double weights.
template <typename F>
void with_weights(const Globals& g, const std::string& path, F&& f) {
  auto w = load_checkpoint(path);
  if (g.f64) f(w.cast<double>());
  else f(w);
}

template <typename T>
void save_weights(const Weights<T>& w, const std::string& path) {
  save_checkpoint(w.template cast<float>(), path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learn embeddings for new tokens by distilling hidden states.", "vocabforge"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", kToolVersion);
  Globals g;
  app.add_option("--config", g.config, "JSON config file");
  app.add_option("--seed", g.seed, "root seed");
  app.add_flag("--f64", g.f64, "run in 64-bit verification mode");
  app.add_option("--out", g.out, "output path");

  std::function<void()> action;

  // tokenize-train
  std::string corpus, eval_corpus, vocab_path, tokens_path, model_path, table_path, snippets_path,
      heldout_path, log_path, dir;
  std::size_t vocab_size = 512;
  auto* c_tok = app.add_subcommand("tokenize-train", "train a byte-level BPE vocab");
  c_tok->add_option("--corpus", corpus, "plain text or .jsonl")->required();
  c_tok->add_option("--vocab-size", vocab_size, "target size including bytes and specials");
  c_tok->callback([&] {
    action = [&] {
      const auto docs = read_corpus(corpus);
      write_text(require_out(g), train_bpe(docs, vocab_size).to_json().dump() + "\n");
    };
  });

  // select-tokens
  SelectionOptions sel;
  auto* c_sel = app.add_subcommand("select-tokens", "pick whole-word candidates");
  c_sel->add_option("--corpus", corpus)->required();
  c_sel->add_option("--eval", eval_corpus)->required();
  c_sel->add_option("--vocab", vocab_path)->required();
  c_sel->add_option("--min-eval", sel.min_eval_count);
  c_sel->add_option("--min-corpus", sel.min_corpus_count);
  c_sel->callback([&] {
    action = [&] {
      const auto a = read_corpus(corpus), b = read_corpus(eval_corpus);
      const auto picked = select_tokens(a, b, load_base(vocab_path), sel);
      write_text(require_out(g), nlohmann::json(picked).dump(1) + "\n");
    };
  });

  // extend-vocab
  bool allow_single = false;
  auto* c_ext = app.add_subcommand("extend-vocab", "add tokens to a vocab");
  c_ext->add_option("--vocab", vocab_path)->required();
  c_ext->add_option("--tokens", tokens_path, "JSON array of strings")->required();
  c_ext->add_flag("--allow-single", allow_single, "admit strings that are already one token");
  c_ext->callback([&] {
    action = [&] {
      const auto ev = ExtendedVocab::extend(load_base(vocab_path), load_strings(tokens_path), allow_single);
      write_text(require_out(g), ev.to_json().dump() + "\n");
    };
  });

  // retrieve
  RetrievalOptions ret;
  double heldout_fraction = 0;
  auto* c_ret = app.add_subcommand("retrieve", "collect snippets for every added token");
  c_ret->add_option("--corpus", corpus)->required();
  c_ret->add_option("--vocab", vocab_path, "extended vocab")->required();
  c_ret->add_option("--n", ret.n_per_target);
  c_ret->add_option("--window", ret.window_tokens);
  c_ret->add_option("--heldout-fraction", heldout_fraction, "extra share retrieved and held out");
  c_ret->add_option("--heldout-out", heldout_path);
  c_ret->callback([&] {
    action = [&] {
      const auto ev = load_ext(vocab_path);
      std::vector<std::string> targets;
      for (const auto& a : ev.added()) targets.push_back(a.text);
      ret.seed = derive_seed(g.seed, "retrieve");
      const std::size_t n = ret.n_per_target;
      if (heldout_fraction > 0) {
        if (heldout_path.empty()) throw Error(ErrorKind::Usage, "--heldout-out is required with --heldout-fraction");
        ret.n_per_target = n + static_cast<std::size_t>(std::ceil(heldout_fraction * static_cast<double>(n)));
      }
      auto set = retrieve_snippets(read_corpus(corpus), targets, ev.base(), ret);
      for (const auto& [t, k] : set.deficits) std::cerr << "note: '" << t << "' has " << k << " snippets\n";
      if (heldout_fraction > 0) {
        // Hold out `extra` of each full list; the half step keeps ceil() from
        // rounding past it.
        const double extra = static_cast<double>(ret.n_per_target - n);
        auto [train, held] = split_snippets(set, (extra - 0.5) / static_cast<double>(ret.n_per_target),
                                            derive_seed(g.seed, "split"));
        write_snippets_jsonl(held, heldout_path);
        set = std::move(train);
      }
      write_snippets_jsonl(set, require_out(g));
    };
  });

  // generate-snippets
  GenerationOptions gen;
  std::vector<std::string> targets;
  auto* c_gen = app.add_subcommand("generate-snippets", "sample snippets from the model");
  c_gen->add_option("--model", model_path)->required();
  c_gen->add_option("--vocab", vocab_path, "extended vocab")->required();
  c_gen->add_option("--target", targets, "added string (default: all)");
  c_gen->add_option("--n", gen.n);
  c_gen->add_option("--length", gen.length_tokens);
  c_gen->add_option("--temperature", gen.temperature);
  c_gen->callback([&] {
    action = [&] {
      const auto ev = load_ext(vocab_path);
      if (targets.empty())
        for (const auto& a : ev.added()) targets.push_back(a.text);
      gen.seed = derive_seed(g.seed, "generate");
      with_weights(g, model_path, [&](const auto& w) {
        SnippetSet all;
        all.cap = gen.n;
        for (const auto& t : targets) {
          auto one = generate_snippets(w, t, ev, gen);
          all.by_target[t] = std::move(one.by_target[t]);
        }
        write_snippets_jsonl(all, require_out(g));
      });
    };
  });

  // pretrain-fixture
  FixtureConfig fx;
  auto* c_fix = app.add_subcommand("pretrain-fixture", "build the synthetic corpus, vocab and teacher");
  c_fix->add_option("--steps", fx.pretrain.steps);
  c_fix->add_option("--docs", fx.train_docs);
  c_fix->callback([&] {
    action = [&] {
      if (app.get_option("--seed")->count()) fx.seed = g.seed;
      load_or_build_fixture(require_out(g), fx, true);
    };
  });

  // init
  std::string method = "mean", output_mode = "zeros";
  auto* c_init = app.add_subcommand("init", "write a starting table for the added tokens");
  c_init->add_option("--model", model_path)->required();
  c_init->add_option("--vocab", vocab_path, "extended vocab")->required();
  c_init->add_option("--method", method)->check(CLI::IsMember({"mean", "random", "zeros"}));
  c_init->add_option("--output-mode", output_mode)->check(CLI::IsMember({"exclude", "zeros", "learned"}));
  c_init->callback([&] {
    action = [&] {
      const auto ev = load_ext(vocab_path);
      const auto w = load_checkpoint(model_path);
      auto t = NewTokenTable::blank(ev, w.config.d_model, output_mode_from_string(output_mode));
      if (method == "random") t.in_emb = init_random(w.in_emb, t.size(), derive_seed(g.seed, "init"));
      for (std::size_t r = 0; r < t.size(); ++r) {
        t.tokens[r].init = method;
        if (method != "mean") continue;
        const auto row = init_subtoken_mean(w.in_emb, t.tokens[r].subtokens);
        std::copy(row.begin(), row.end(), t.in_emb.row(r).begin());
        if (t.output_mode == OutputMode::Learned) {
          const auto out = init_subtoken_mean(w.out_emb(), t.tokens[r].subtokens);
          std::copy(out.begin(), out.end(), t.out_emb.row(r).begin());
        }
      }
      t.save(require_out(g));
    };
  });

  // train
  std::optional<std::string> objective, combine, mode, joint;
  std::optional<std::size_t> tap_layer, epochs, batch_size;
  std::optional<double> lr;
  std::string grid, sweep_out, model_out;
  auto* c_train = app.add_subcommand("train", "optimize the added rows");
  c_train->add_option("--model", model_path)->required();
  c_train->add_option("--vocab", vocab_path, "extended vocab")->required();
  c_train->add_option("--snippets", snippets_path)->required();
  c_train->add_option("--table", table_path, "starting table")->required();
  c_train->add_option("--objective", objective)
      ->check(CLI::IsMember({"td", "td_logits", "td_kl", "ntp_masked", "ntp_all"}));
  c_train->add_option("--combine", combine)->check(CLI::IsMember({"none", "sum", "autoscaled"}));
  c_train->add_option("--tap-layer", tap_layer);
  c_train->add_option("--joint", joint)->check(CLI::IsMember({"true", "false"}));
  c_train->add_option("--output-mode", mode)->check(CLI::IsMember({"exclude", "zeros", "learned"}));
  c_train->add_option("--lr", lr);
  c_train->add_option("--epochs", epochs);
  c_train->add_option("--batch-size", batch_size);
  c_train->add_option("--lr-sweep", grid, "comma-separated grid; needs --heldout");
  c_train->add_option("--heldout", heldout_path);
  c_train->add_option("--sweep-out", sweep_out, "sweep table as JSON");
  c_train->add_option("--log", log_path, "per-step JSONL log");
  c_train->add_option("--model-out", model_out, "updated checkpoint (ntp_all)");
  c_train->callback([&] {
    action = [&] {
      auto cfg = TrainConfig::from_json(config_section(g, "train"));
      if (objective) cfg.objective.kind = objective_from_string(*objective);
      if (combine) cfg.objective.combine = combine_from_string(*combine);
      if (tap_layer) cfg.objective.tap_layer = *tap_layer;
      if (joint) cfg.joint = *joint == "true";
      if (mode) cfg.objective.output_mode = output_mode_from_string(*mode);
      if (lr) cfg.lr = *lr;
      if (epochs) cfg.epochs = *epochs;
      if (batch_size) cfg.batch_size = *batch_size;
      cfg.seed = derive_seed(g.seed, "train");
      cfg.validate();
      const auto ev = load_ext(vocab_path);
      const auto snippets = read_snippets_jsonl(snippets_path, cfg.n_per_target);
      const auto start = NewTokenTable::load(table_path);
      with_weights(g, model_path, [&](const auto& w) {
        if (!grid.empty()) {
          if (heldout_path.empty()) throw Error(ErrorKind::Usage, "--lr-sweep needs --heldout");
          const auto held = read_snippets_jsonl(heldout_path, cfg.n_per_target);
          const auto sweep = lr_sweep(w, ev, snippets, held, start, cfg, parse_grid(grid));
          nlohmann::ordered_json rows = nlohmann::ordered_json::array();
          for (const auto& r : sweep.rows)
            rows.push_back({{"lr", r.lr}, {"heldout", std::isfinite(r.heldout) ? nlohmann::ordered_json(r.heldout) : nlohmann::ordered_json()}});
          std::cerr << "selected lr " << sweep.best_lr << '\n';
          if (!sweep_out.empty())
            write_text(sweep_out, nlohmann::ordered_json{{"best_lr", sweep.best_lr}, {"rows", rows}}.dump(2) + "\n");
          cfg.lr = sweep.best_lr;
        }
        const auto res = train_embeddings(w, ev, snippets, start, cfg);
        res.table.save(require_out(g));
        if (!log_path.empty()) write_log_jsonl(res.log, log_path);
        if (res.model) {
          if (model_out.empty()) throw Error(ErrorKind::Usage, "ntp_all updates the model; pass --model-out");
          save_weights(*res.model, model_out);
        }
      });
    };
  });

  // continued-train
  ContinuedConfig cc;
  std::string table_out;
  auto* c_cont = app.add_subcommand("continued-train", "next-token training of embeddings and outer blocks");
  c_cont->add_option("--model", model_path)->required();
  c_cont->add_option("--vocab", vocab_path, "extended vocab")->required();
  c_cont->add_option("--table", table_path)->required();
  c_cont->add_option("--corpus", corpus)->required();
  c_cont->add_option("--steps", cc.steps);
  c_cont->add_option("--lr", cc.lr);
  c_cont->add_option("--warmup", cc.warmup);
  c_cont->add_option("--batch", cc.batch);
  c_cont->add_option("--seq-len", cc.seq_len);
  c_cont->add_option("--table-out", table_out)->required();
  c_cont->callback([&] {
    action = [&] {
      const auto sec = config_section(g, "continued");
      for (const auto& [k, v] : sec.items()) {
        if (k == "steps") cc.steps = v.get<std::size_t>();
        else if (k == "lr") cc.lr = v.get<double>();
        else if (k == "warmup") cc.warmup = v.get<std::size_t>();
        else if (k == "batch") cc.batch = v.get<std::size_t>();
        else if (k == "seq_len") cc.seq_len = v.get<std::size_t>();
        else if (k == "weight_decay") cc.weight_decay = v.get<double>();
        else if (k == "grad_clip") cc.grad_clip = v.get<double>();
        else throw Error(ErrorKind::Config, "unknown continued config key '" + k + "'");
      }
      cc.seed = derive_seed(g.seed, "continued");
      const auto ev = load_ext(vocab_path);
      const auto docs = read_corpus(corpus);
      std::vector<TokenId> stream;
      for (const auto& d : docs) {
        stream.push_back(ev.base().bos());
        for (TokenId t : ev.encode(d)) stream.push_back(t);
      }
      const auto table = NewTokenTable::load(table_path);
      with_weights(g, model_path, [&](const auto& w) {
        const auto res = continued_train(w, table, stream, cc);
        save_weights(res.weights, require_out(g));
        res.table.save(table_out);
        std::cerr << "loss " << res.losses.front() << " -> " << res.losses.back() << '\n';
      });
    };
  });

  // eval-compression
  auto* c_comp = app.add_subcommand("eval-compression", "token counts with and without the added tokens");
  c_comp->add_option("--vocab", vocab_path, "extended vocab")->required();
  c_comp->add_option("--texts", corpus)->required();
  c_comp->callback([&] {
    action = [&] {
      const auto ev = load_ext(vocab_path);
      auto r = compression_report(read_corpus(corpus), ev.base(), ev);
      r.seed = g.seed;
      r.write(require_out(g));
    };
  });

  // eval-fidelity
  std::size_t eval_tap = kFullDepth;
  auto* c_fid = app.add_subcommand("eval-fidelity", "held-out hidden-state and KL fidelity");
  c_fid->add_option("--model", model_path)->required();
  c_fid->add_option("--vocab", vocab_path, "extended vocab")->required();
  c_fid->add_option("--table", table_path)->required();
  c_fid->add_option("--heldout", heldout_path)->required();
  c_fid->add_option("--tap-layer", eval_tap);
  c_fid->callback([&] {
    action = [&] {
      const auto ev = load_ext(vocab_path);
      const auto table = NewTokenTable::load(table_path);
      const auto held = read_snippets_jsonl(heldout_path, std::numeric_limits<std::size_t>::max());
      with_weights(g, model_path, [&](const auto& w) {
        auto r = fidelity_report(w, ev, table, held, eval_tap);
        r.seed = g.seed;
        r.write(require_out(g));
      });
    };
  });

  // eval-recovery
  std::string token;
  std::size_t rec_n = 40;
  auto* c_rec = app.add_subcommand("eval-recovery", "re-learn an existing token from a random start");
  c_rec->add_option("--model", model_path)->required();
  c_rec->add_option("--vocab", vocab_path)->required();
  c_rec->add_option("--corpus", corpus)->required();
  c_rec->add_option("--token", token, "a string that is one base token")->required();
  c_rec->add_option("--n", rec_n, "snippets to retrieve");
  c_rec->add_option("--lr", lr);
  c_rec->add_option("--epochs", epochs);
  c_rec->callback([&] {
    action = [&] {
      auto cfg = TrainConfig::from_json(config_section(g, "train"));
      if (lr) cfg.lr = *lr;
      if (epochs) cfg.epochs = *epochs;
      cfg.seed = derive_seed(g.seed, "train");
      const auto base = load_base(vocab_path);
      const std::vector<std::string> one{token};
      const auto snippets = retrieve_snippets(read_corpus(corpus), one, base,
                                              RetrievalOptions{rec_n, cfg.window_tokens, derive_seed(g.seed, "retrieve")});
      with_weights(g, model_path, [&](const auto& w) {
        RecoveryOptions opts;
        opts.seed = derive_seed(g.seed, "recovery");
        auto r = recovery_test(w, base, token, snippets, cfg, opts);
        r.seed = g.seed;
        r.write(require_out(g));
        std::cerr << (r.aggregate["pass"].template get<bool>() ? "PASS" : "FAIL") << '\n';
      });
    };
  });

  // eval-definitions
  std::size_t max_new = 24;
  std::string prompt_template = kDefinitionTemplate;
  auto* c_def = app.add_subcommand("eval-definitions", "compare greedy definition continuations");
  c_def->add_option("--model", model_path)->required();
  c_def->add_option("--vocab", vocab_path, "extended vocab")->required();
  c_def->add_option("--table", table_path)->required();
  c_def->add_option("--token", targets, "added string (default: all)");
  c_def->add_option("--max-new", max_new);
  c_def->add_option("--template", prompt_template, "prompt with a {token} slot");
  c_def->callback([&] {
    action = [&] {
      const auto ev = load_ext(vocab_path);
      const auto table = NewTokenTable::load(table_path);
      if (targets.empty())
        for (const auto& a : ev.added()) targets.push_back(a.text);
      with_weights(g, model_path, [&](const auto& w) {
        auto r = definition_diff(w, ev, table, targets, max_new, prompt_template);
        r.seed = g.seed;
        r.write(require_out(g));
      });
    };
  });

  // generate
  std::string prompt;
  double temperature = 0;
  std::string gen_mode = "exclude";
  auto* c_run = app.add_subcommand("generate", "continue a prompt");
  c_run->add_option("--model", model_path)->required();
  c_run->add_option("--vocab", vocab_path, "base or extended vocab")->required();
  c_run->add_option("--table", table_path, "added rows (with an extended vocab)");
  c_run->add_option("--prompt", prompt)->required();
  c_run->add_option("--max-new", max_new);
  c_run->add_option("--temperature", temperature);
  c_run->add_option("--mode", gen_mode)->check(CLI::IsMember({"exclude", "zeros", "learned"}));
  c_run->callback([&] {
    action = [&] {
      const auto j = read_json(vocab_path);
      const auto ev = j.contains("added") ? ExtendedVocab::from_json(j) : ExtendedVocab::extend(Vocab::from_json(j), {});
      std::optional<NewTokenTable> table;
      if (!table_path.empty()) table = NewTokenTable::load(table_path);
      if (table && table->size() != ev.added().size())
        throw Error(ErrorKind::Usage, "table does not match the vocab");
      with_weights(g, model_path, [&](const auto& w) {
        using T = std::decay_t<decltype(w.in_emb(0, 0))>;
        std::vector<TokenId> ids{ev.base().bos()};
        for (TokenId t : table ? ev.encode(prompt) : ev.base().encode(prompt)) ids.push_back(t);
        std::optional<TableView<T>> view;
        if (table) view.emplace(*table);
        const auto out = generate(w, ids, max_new, Sampling{temperature, derive_seed(g.seed, "sample")},
                                  output_mode_from_string(gen_mode), view ? view->rows() : AddedRows<T>{});
        std::cout << ev.decode(out) << '\n';
      });
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  try {
    if (action) action();
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error (format): " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

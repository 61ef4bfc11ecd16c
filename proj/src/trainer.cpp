#include "vf/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>

#include "vf/error.hpp"
#include "vf/rng.hpp"

namespace vf {

void TrainConfig::validate() const {
  if (!(lr > 0) || !std::isfinite(lr)) throw Error(ErrorKind::Config, "lr must be positive");
  if (batch_size == 0) throw Error(ErrorKind::Config, "batch_size must be at least 1");
  if (!(warmup_fraction >= 0 && warmup_fraction <= 1))
    throw Error(ErrorKind::Config, "warmup_fraction must lie in [0, 1]");
  if (weight_decay < 0) throw Error(ErrorKind::Config, "weight_decay must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
    throw Error(ErrorKind::Config, "betas must lie in [0, 1)");
  if (!(eps > 0)) throw Error(ErrorKind::Config, "eps must be positive");
  if (max_norm && !(*max_norm > 0)) throw Error(ErrorKind::Config, "max_norm must be positive");
  if (objective.head_only && objective.output_mode != OutputMode::Learned)
    throw Error(ErrorKind::Config, "head_only training needs output_mode learned");
  if (objective.is_ntp() && objective.combine != Combine::None)
    throw Error(ErrorKind::Config, "combine applies to distillation objectives only");
}

nlohmann::ordered_json TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["lr"] = lr;
  j["batch_size"] = batch_size;
  j["epochs"] = epochs;
  j["warmup_fraction"] = warmup_fraction;
  j["weight_decay"] = weight_decay;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["eps"] = eps;
  j["seed"] = seed;
  j["objective"] = to_string(objective.kind);
  j["tap_layer"] = objective.tap_layer == kFullDepth ? nlohmann::ordered_json()
                                                      : nlohmann::ordered_json(objective.tap_layer);
  j["combine"] = to_string(objective.combine);
  j["output_mode"] = to_string(objective.output_mode);
  j["supervise_span_end"] = objective.supervise_span_end;
  j["weight_by_pairs"] = objective.weight_by_pairs;
  j["head_only"] = objective.head_only;
  j["joint"] = joint;
  j["n_per_target"] = n_per_target;
  j["window_tokens"] = window_tokens;
  j["max_norm"] = max_norm ? nlohmann::ordered_json(*max_norm) : nlohmann::ordered_json();
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorKind::Config, "training config must be a JSON object");
  TrainConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "lr") c.lr = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "warmup_fraction") c.warmup_fraction = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "beta1") c.beta1 = v.get<double>();
      else if (key == "beta2") c.beta2 = v.get<double>();
      else if (key == "eps") c.eps = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "objective") c.objective.kind = objective_from_string(v.get<std::string>());
      else if (key == "tap_layer") c.objective.tap_layer = v.is_null() ? kFullDepth : v.get<std::size_t>();
      else if (key == "combine") c.objective.combine = combine_from_string(v.get<std::string>());
      else if (key == "output_mode") c.objective.output_mode = output_mode_from_string(v.get<std::string>());
      else if (key == "supervise_span_end") c.objective.supervise_span_end = v.get<bool>();
      else if (key == "weight_by_pairs") c.objective.weight_by_pairs = v.get<bool>();
      else if (key == "head_only") c.objective.head_only = v.get<bool>();
      else if (key == "joint") c.joint = v.get<bool>();
      else if (key == "n_per_target") c.n_per_target = v.get<std::size_t>();
      else if (key == "window_tokens") c.window_tokens = v.get<std::size_t>();
      else if (key == "max_norm") c.max_norm = v.is_null() ? std::nullopt : std::optional(v.get<double>());
      else throw Error(ErrorKind::Config, "unknown training config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, std::string("training config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::ordered_json LogEntry::to_json() const {
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json();
  };
  return {{"step", step},       {"lr", lr},   {"loss", loss}, {"loss_td", opt(loss_td)},
          {"loss_ntp", opt(loss_ntp)}, {"alpha", opt(alpha)}, {"grad_norm", grad_norm}};
}

void write_log_jsonl(const std::vector<LogEntry>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Input, "cannot write " + path.string());
  for (const auto& e : log) out << e.to_json().dump() << '\n';
}

std::vector<Example> prepare_examples(const SnippetSet& set, const ExtendedVocab& vocab,
                                      const PrepareOptions& opts) {
  const Vocab& base = vocab.base();
  const auto V = static_cast<TokenId>(base.size());
  std::vector<Example> out;
  for (const auto& [target, list] : set.by_target) {
    const auto id = vocab.find_added(target);
    if (!id) {
      std::cerr << "note: '" << target << "' is not an added token; its snippets are skipped\n";
      continue;
    }
    // Isolated snippets see only their own added string.
    ExtendedVocab single;
    if (opts.isolated) {
      const std::vector<std::string> one{target};
      single = ExtendedVocab::extend(base, one, vocab.allows_single_token());
    }
    const ExtendedVocab& ev = opts.isolated ? single : vocab;
    for (std::size_t k = 0; k < list.size(); ++k) {
      Example ex;
      ex.target = target;
      ex.id = *id;
      ex.s_tau.push_back(base.bos());
      for (TokenId t : base.encode(list[k].text)) ex.s_tau.push_back(t);
      ex.s_star.push_back(base.bos());
      for (TokenId t : ev.encode(list[k].text)) ex.s_star.push_back(t);
      if (std::find(ex.s_star.begin(), ex.s_star.end(), opts.isolated ? V : *id) == ex.s_star.end()) {
        std::cerr << "note: snippet " << k << " of '" << target << "' does not use the token\n";
        continue;
      }
      ex.map = align(ex.s_tau, ex.s_star, ev, AlignOptions{opts.supervise_span_end});
      if (opts.isolated) {
        for (auto& t : ex.s_star)
          if (t == V) t = *id;
        for (auto& o : ex.map.occurrences) o.id = *id;
      }
      if (opts.need_pairs && ex.map.empty()) {
        std::cerr << "note: snippet " << k << " of '" << target << "' has no mapped positions\n";
        continue;
      }
      out.push_back(std::move(ex));
    }
  }
  return out;
}

namespace {

template <typename T>
struct TeacherStates {
  Tensor<T> tap;
  std::optional<Tensor<T>> logits;

  bool operator==(const TeacherStates&) const = default;
};

template <typename T>
TeacherStates<T> run_teacher(const Weights<T>& w, const Example& ex, std::size_t tap, bool logits) {
  ForwardOptions fo;
  fo.tap_layer = logits ? w.config.n_layers : tap;
  fo.need_logits = logits;
  auto tr = forward(w, ex.s_tau, fo);
  return {std::move(tr.hidden[tap]), std::move(tr.logits)};
}

template <typename T>
void add_sq(double& acc, std::span<const T> v) {
  for (T x : v) acc += static_cast<double>(x) * static_cast<double>(x);
}

template <typename T>
void scale(Tensor<T>& t, double s) {
  for (auto& v : t.values()) v = static_cast<T>(v * s);
}

template <typename T>
void clamp_rows(Tensor<T>& t, double max_norm) {
  for (std::size_t r = 0; r < t.rows(); ++r) {
    auto row = t.row(r);
    double sq = 0;
    add_sq<T>(sq, row);
    const double n = std::sqrt(sq);
    if (n > max_norm)
      for (auto& v : row) v = static_cast<T>(v * (max_norm / n));
  }
}

std::vector<std::vector<std::size_t>> make_batches(const std::vector<Example>& ex, bool joint,
                                                   std::size_t batch, std::uint64_t seed,
                                                   std::size_t epoch) {
  Rng rng(derive_seed(seed, "shuffle:epoch" + std::to_string(epoch)));
  std::vector<std::vector<std::size_t>> out;
  auto chunk = [&](const std::vector<std::size_t>& idx) {
    for (std::size_t b = 0; b < idx.size(); b += batch)
      out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(b),
                       idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), b + batch)));
  };
  if (joint) {
    std::vector<std::size_t> idx(ex.size());
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx.begin(), idx.end());
    chunk(idx);
    return out;
  }
  std::map<TokenId, std::vector<std::size_t>> groups;
  for (std::size_t k = 0; k < ex.size(); ++k) groups[ex[k].id].push_back(k);
  for (auto& [id, idx] : groups) {
    rng.shuffle(idx.begin(), idx.end());
    chunk(idx);
  }
  rng.shuffle(out.begin(), out.end());
  return out;
}

}  // namespace

template <typename T>
TrainResult<T> train_embeddings(const Weights<T>& w, const ExtendedVocab& vocab,
                                const SnippetSet& snippets, const NewTokenTable& start,
                                const TrainConfig& cfg) {
  cfg.validate();
  const ObjectiveConfig& obj = cfg.objective;
  const std::size_t L = w.config.n_layers, V = w.config.vocab_size, d = w.config.d_model;
  obj.validate(L);
  if (vocab.base_size() != V) throw Error(ErrorKind::Usage, "vocab size differs from the model");
  if (start.size() != vocab.added().size() || start.dim() != d)
    throw Error(ErrorKind::Usage, "starting table does not match the extended vocab and model");
  if (snippets.total() == 0) throw Error(ErrorKind::Input, "snippet set is empty");

  const std::size_t tap = obj.tap(L);
  const bool td = obj.is_td();
  const bool ntp = obj.is_ntp() || obj.combine != Combine::None;
  const bool logits = obj.needs_logits();
  const bool teacher_logits = obj.kind == ObjectiveKind::TDLogits || obj.kind == ObjectiveKind::TDKL;
  const bool learned = obj.output_mode == OutputMode::Learned;
  const bool all_tables = obj.kind == ObjectiveKind::NTPAll;

  const auto examples = prepare_examples(
      snippets, vocab, PrepareOptions{!cfg.joint, obj.supervise_span_end, td});
  if (examples.empty()) throw Error(ErrorKind::Input, "no snippet is usable for training");

  TrainResult<T> res;
  res.table = start;
  res.table.output_mode = obj.output_mode;
  if (cfg.max_norm) res.table.max_norm = cfg.max_norm;
  if (!learned) res.table.out_emb = Tensor<float>({start.size(), d});

  const auto Vid = static_cast<TokenId>(V);
  std::vector<bool> trainable(start.size(), false);
  for (const auto& ex : examples) trainable[static_cast<std::size_t>(ex.id - Vid)] = true;
  for (std::size_t r = 0; r < start.size(); ++r)
    if (!trainable[r]) {
      res.untrained.push_back(start.tokens[r].text);
      std::cerr << "note: '" << start.tokens[r].text << "' has no usable snippet and keeps its start\n";
    }

  TableView<T> rows(res.table);
  if (all_tables) res.model = w;
  const Weights<T>& student_w = all_tables ? *res.model : w;

  std::vector<std::optional<TeacherStates<T>>> cache(examples.size());
  std::vector<AdamState> in_state(start.size()), out_state(start.size());
  AdamState base_in_state, base_out_state;
  const AdamWConfig adam = cfg.adamw();

  std::vector<std::vector<std::vector<std::size_t>>> epochs;
  std::size_t total = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    epochs.push_back(make_batches(examples, cfg.joint, cfg.batch_size, cfg.seed, e));
    total += epochs.back().size();
  }
  const auto warmup = static_cast<std::uint64_t>(std::llround(cfg.warmup_fraction * static_cast<double>(total)));

  GradRequest req;
  if (td) {
    req.added_input = true;
    req.added_output = learned && ntp;
  } else {
    req = ntp_routing(obj);
  }

  std::size_t step = 0;
  for (const auto& batches : epochs) {
    for (const auto& batch : batches) {
      const double B = static_cast<double>(batch.size());
      double pairs_total = 0;
      for (auto k : batch) pairs_total += static_cast<double>(examples[k].map.size());

      struct Item {
        ForwardTrace<T> trace;
        LossGrad<T> td, ntp;
        double td_weight = 0;
      };
      std::vector<Item> items;
      items.reserve(batch.size());
      double l_td = 0, l_ntp = 0;
      const AddedRows<T> added = rows.rows();
      for (auto k : batch) {
        const Example& ex = examples[k];
        Item it;
        if (td) {
          if (!cache[k]) {
            cache[k] = run_teacher(w, ex, tap, teacher_logits);
            ++res.teacher_forwards;
          } else if (cfg.verify_teacher_cache) {
            if (!(run_teacher(w, ex, tap, teacher_logits) == *cache[k]))
              throw Error(ErrorKind::Training, "cached teacher states differ from a fresh forward");
          }
        }
        ForwardOptions fo;
        fo.tap_layer = logits ? L : tap;
        fo.need_logits = logits;
        fo.keep_cache = true;
        it.trace = forward(student_w, ex.s_star, fo, added);
        if (td) {
          const auto& t = *cache[k];
          switch (obj.kind) {
            case ObjectiveKind::TD: it.td = td_loss(t.tap, it.trace.hidden[tap], ex.map); break;
            case ObjectiveKind::TDLogits: it.td = logit_mse_loss(*t.logits, *it.trace.logits, ex.map); break;
            case ObjectiveKind::TDKL: it.td = kl_loss(*t.logits, *it.trace.logits, ex.map); break;
            default: break;
          }
          it.td_weight = obj.weight_by_pairs ? static_cast<double>(ex.map.size()) / pairs_total : 1.0 / B;
          l_td += it.td_weight * it.td.value;
        }
        if (ntp) {
          it.ntp = ntp_loss(*it.trace.logits, ex.s_star);
          l_ntp += it.ntp.value / B;
        }
        items.push_back(std::move(it));
      }

      LogEntry entry;
      entry.step = step;
      double alpha = 0;
      if (td && ntp) {
        const Combined c = combine(l_td, l_ntp, obj.combine);
        entry.loss = c.value;
        entry.alpha = alpha = c.alpha;
      } else {
        entry.loss = td ? l_td : l_ntp;
      }
      if (td) entry.loss_td = l_td;
      if (ntp) entry.loss_ntp = l_ntp;
      if (!std::isfinite(entry.loss))
        throw Error(ErrorKind::Training, "training loss is not finite at step " + std::to_string(step));

      GradBundle<T> acc;
      for (auto& it : items) {
        Upstream<T> up;
        Tensor<T> d_logits;
        if (td) {
          scale(it.td.grad, it.td_weight);
          if (obj.kind == ObjectiveKind::TD) {
            up.d_tap = &it.td.grad;
            if (tap < it.trace.tap_layer) up.layer = tap;
          } else {
            d_logits = std::move(it.td.grad);
          }
        }
        if (ntp) {
          scale(it.ntp.grad, (td ? alpha : 1.0) / B);
          if (d_logits.empty()) d_logits = std::move(it.ntp.grad);
          else add_inplace(d_logits, it.ntp.grad);
        }
        if (!d_logits.empty()) up.d_logits = &d_logits;
        accumulate(acc, backward(student_w, it.trace, up, req, added));
      }

      double sq = 0;
      for (std::size_t r = 0; r < start.size(); ++r) {
        if (!trainable[r]) continue;
        if (!acc.added_in.empty()) add_sq<T>(sq, std::as_const(acc.added_in).row(r));
        if (!acc.added_out.empty()) add_sq<T>(sq, std::as_const(acc.added_out).row(r));
      }
      if (all_tables) {
        if (student_w.config.tied) add_inplace(acc.in_emb, acc.out_emb);
        add_sq<T>(sq, std::as_const(acc.in_emb).values());
        if (!student_w.config.tied) add_sq<T>(sq, std::as_const(acc.out_emb).values());
      }
      entry.grad_norm = std::sqrt(sq);
      entry.lr = warmup_constant_lr(cfg.lr, step + 1, warmup);

      // Isolated batches move only their own row.
      std::vector<bool> update = trainable;
      if (!cfg.joint) {
        std::fill(update.begin(), update.end(), false);
        update[static_cast<std::size_t>(examples[batch.front()].id - Vid)] = true;
      }
      try {
        for (std::size_t r = 0; r < start.size(); ++r) {
          if (!update[r]) continue;
          bool moved = false;
          if (!acc.added_in.empty()) {
            adamw_step<T>(rows.in.row(r), std::as_const(acc.added_in).row(r), in_state[r], entry.lr, adam);
            moved = true;
          }
          if (learned && !acc.added_out.empty()) {
            adamw_step<T>(rows.out.row(r), std::as_const(acc.added_out).row(r), out_state[r], entry.lr, adam);
            moved = true;
          }
          if (moved) ++res.table.tokens[r].steps;
        }
        if (all_tables) {
          adamw_step<T>(res.model->in_emb.values(), std::as_const(acc.in_emb).values(), base_in_state,
                        entry.lr, adam);
          if (!student_w.config.tied)
            adamw_step<T>(res.model->untied_out.values(), std::as_const(acc.out_emb).values(),
                          base_out_state, entry.lr, adam);
        }
      } catch (const Error& e) {
        throw Error(e.kind(), std::string(e.what()) + " (step " + std::to_string(step) + ")");
      }
      if (cfg.max_norm) clamp_rows(rows.in, *cfg.max_norm);
      res.log.push_back(entry);
      ++step;
    }
  }

  res.table.in_emb = rows.in.template cast<float>();
  if (learned) res.table.out_emb = rows.out.template cast<float>();
  res.table.validate();
  return res;
}

template <typename T>
std::vector<SnippetMetrics> evaluate_snippets(const Weights<T>& w, const ExtendedVocab& vocab,
                                              const NewTokenTable& table, const SnippetSet& set,
                                              std::size_t tap, bool supervise_span_end) {
  const std::size_t L = w.config.n_layers;
  if (tap == kFullDepth) tap = L;
  if (tap < 1 || tap > L) throw Error(ErrorKind::Usage, "tap layer outside [1, L]");
  const auto examples = prepare_examples(set, vocab, PrepareOptions{false, supervise_span_end, false});
  TableView<T> rows(table);
  ForwardOptions fo;
  fo.need_logits = true;
  std::vector<SnippetMetrics> out;
  for (const auto& ex : examples) {
    const auto teacher = forward(w, ex.s_tau, fo);
    const auto student = forward(w, ex.s_star, fo, rows.rows());
    SnippetMetrics m;
    m.target = ex.target;
    if (!ex.map.empty()) {
      m.td = td_loss(teacher.hidden[tap], student.hidden[tap], ex.map).value;
      m.kl = kl_loss(*teacher.logits, *student.logits, ex.map).value;
    }
    m.ntp = ntp_loss(*student.logits, ex.s_star).value;
    out.push_back(std::move(m));
  }
  return out;
}

template <typename T>
SweepResult lr_sweep(const Weights<T>& w, const ExtendedVocab& vocab, const SnippetSet& train,
                     const SnippetSet& heldout, const NewTokenTable& start, const TrainConfig& cfg,
                     const std::vector<double>& grid) {
  if (grid.empty()) throw Error(ErrorKind::Usage, "learning-rate grid is empty");
  const std::size_t tap = cfg.objective.tap(w.config.n_layers);
  SweepResult res;
  for (double lr : grid) {
    TrainConfig c = cfg;
    c.lr = lr;
    double score = std::numeric_limits<double>::infinity();
    try {
      const auto r = train_embeddings(w, vocab, train, start, c);
      const auto metrics = evaluate_snippets(r.model ? *r.model : w, vocab, r.table, heldout, tap,
                                             cfg.objective.supervise_span_end);
      double sum = 0;
      std::size_t n = 0;
      for (const auto& m : metrics) {
        if (cfg.objective.is_td()) {
          if (!m.td) continue;
          sum += *m.td;
        } else {
          sum += m.ntp;
        }
        ++n;
      }
      if (n == 0) throw Error(ErrorKind::Input, "held-out set has no usable snippet");
      if (std::isfinite(sum)) score = sum / static_cast<double>(n);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Training && e.kind() != ErrorKind::Numeric) throw;
      std::cerr << "note: lr " << lr << " diverged: " << e.what() << '\n';
    }
    res.rows.push_back({lr, score});
  }
  const SweepRow* best = &res.rows.front();
  for (const auto& r : res.rows)
    if (r.heldout < best->heldout || (r.heldout == best->heldout && r.lr < best->lr)) best = &r;
  res.best_lr = best->lr;
  return res;
}

template <typename T>
ContinuedResult<T> continued_train(const Weights<T>& w, const NewTokenTable& table,
                                   std::span<const TokenId> stream, const ContinuedConfig& cfg) {
  const auto& mc = w.config;
  if (table.dim() != mc.d_model) throw Error(ErrorKind::Usage, "table width differs from the model");
  if (cfg.batch == 0 || !(cfg.lr > 0)) throw Error(ErrorKind::Config, "continued training needs batch ≥ 1 and lr > 0");
  ContinuedResult<T> res{w, table, {}};
  if (cfg.steps == 0) return res;
  const std::size_t win = cfg.seq_len + 1;
  if (win > mc.max_seq || win > stream.size())
    throw Error(ErrorKind::Input, "stream or max_seq is shorter than one training window");
  const auto limit = static_cast<TokenId>(mc.vocab_size + table.size());
  for (TokenId id : stream)
    if (id < 0 || id >= limit) throw Error(ErrorKind::Id, "stream holds id " + std::to_string(id));

  Weights<T>& m = res.weights;
  TableView<T> rows(table);
  const bool learned = table.output_mode == OutputMode::Learned;
  GradRequest req;
  req.all_input = true;
  req.output_table = true;
  req.added_input = true;
  req.added_output = learned;
  req.layers = {0};
  if (mc.n_layers > 1) req.layers.push_back(mc.n_layers - 1);

  // Parameter slots and their gradients, in a fixed order.
  std::vector<Tensor<T>*> params{&m.in_emb};
  if (!mc.tied) params.push_back(&m.untied_out);
  for (auto l : req.layers) m.layers[l].visit([&](const char*, Tensor<T>& t) { params.push_back(&t); });
  params.push_back(&rows.in);
  if (learned) params.push_back(&rows.out);
  std::vector<AdamState> states(params.size());
  const AdamWConfig plain{0.9, 0.999, 1e-8, 0.0};
  AdamWConfig decayed = plain;
  decayed.weight_decay = cfg.weight_decay;

  Rng rng(derive_seed(cfg.seed, "continued:windows"));
  ForwardOptions fo;
  fo.need_logits = true;
  fo.keep_cache = true;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    GradBundle<T> acc;
    double loss = 0;
    const AddedRows<T> added = rows.rows();
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const auto window = stream.subspan(rng.below(stream.size() - win + 1), win);
      auto tr = forward(m, window, fo, added);
      auto lg = ntp_loss(*tr.logits, window);
      loss += lg.value / static_cast<double>(cfg.batch);
      scale(lg.grad, 1.0 / static_cast<double>(cfg.batch));
      accumulate(acc, backward(m, tr, Upstream<T>{nullptr, &lg.grad}, req, added));
    }
    if (!std::isfinite(loss))
      throw Error(ErrorKind::Training, "continued training diverged at step " + std::to_string(step));
    res.losses.push_back(loss);

    if (mc.tied) add_inplace(acc.in_emb, acc.out_emb);
    std::vector<Tensor<T>*> grads{&acc.in_emb};
    if (!mc.tied) grads.push_back(&acc.out_emb);
    for (auto l : req.layers) acc.layers.at(l).visit([&](const char*, Tensor<T>& t) { grads.push_back(&t); });
    grads.push_back(&acc.added_in);
    if (learned) grads.push_back(&acc.added_out);

    if (cfg.grad_clip > 0) {
      double sq = 0;
      for (auto* g : grads) add_sq<T>(sq, std::as_const(*g).values());
      const double norm = std::sqrt(sq);
      if (norm > cfg.grad_clip)
        for (auto* g : grads) scale(*g, cfg.grad_clip / norm);
    }
    const double lr = warmup_cosine_lr(cfg.lr, step, cfg.warmup, cfg.steps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const bool matrix = params[i]->rank() == 2 && params[i] != &rows.in && params[i] != &rows.out;
      adamw_step<T>(params[i]->values(), std::as_const(*grads[i]).values(), states[i], lr,
                    matrix ? decayed : plain);
    }
  }
  res.table.in_emb = rows.in.template cast<float>();
  if (learned) res.table.out_emb = rows.out.template cast<float>();
  for (auto& t : res.table.tokens) t.steps += cfg.steps;
  return res;
}

#define VF_INSTANTIATE(T)                                                                       \
  template TrainResult<T> train_embeddings(const Weights<T>&, const ExtendedVocab&,            \
                                           const SnippetSet&, const NewTokenTable&,            \
                                           const TrainConfig&);                                \
  template std::vector<SnippetMetrics> evaluate_snippets(const Weights<T>&, const ExtendedVocab&, \
                                                         const NewTokenTable&, const SnippetSet&, \
                                                         std::size_t, bool);                   \
  template SweepResult lr_sweep(const Weights<T>&, const ExtendedVocab&, const SnippetSet&,    \
                                const SnippetSet&, const NewTokenTable&, const TrainConfig&,   \
                                const std::vector<double>&);                                   \
  template ContinuedResult<T> continued_train(const Weights<T>&, const NewTokenTable&,         \
                                              std::span<const TokenId>, const ContinuedConfig&);

VF_INSTANTIATE(float)
VF_INSTANTIATE(double)

}  // namespace vf

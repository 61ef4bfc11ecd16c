#include <cmath>

#include "vf/error.hpp"
#include "vf/model.hpp"
#include "vf/optim.hpp"
#include "vf/rng.hpp"

namespace vf {

PretrainResult pretrain_fixture(const ModelConfig& cfg, std::span<const TokenId> stream,
                                const PretrainOptions& opts,
                                const std::function<void(std::size_t, double)>& on_step) {
  cfg.validate();
  PretrainResult res{Weights<float>::init(cfg, opts.seed), {}};
  if (opts.steps == 0) return res;
  if (opts.seq_len + 1 > stream.size() || opts.seq_len > cfg.max_seq || opts.batch == 0)
    throw Error(ErrorKind::Input, "pretraining stream is shorter than one training window");
  for (TokenId id : stream)
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
      throw Error(ErrorKind::Id, "pretraining stream holds id " + std::to_string(id));

  Weights<float>& w = res.weights;
  const GradRequest req = GradRequest::all_weights(cfg);
  const AdamWConfig adam{0.9, 0.999, 1e-8, 0.0};
  AdamWConfig decayed = adam;
  decayed.weight_decay = opts.weight_decay;
  auto params = w.named();
  std::vector<AdamState> states(params.size());
  Rng rng(derive_seed(opts.seed, "pretrain:windows"));
  ForwardOptions fo;
  fo.need_logits = true;
  fo.keep_cache = true;

  for (std::size_t step = 0; step < opts.steps; ++step) {
    GradBundle<float> acc;
    double loss = 0;
    for (std::size_t b = 0; b < opts.batch; ++b) {
      const auto start = rng.below(stream.size() - opts.seq_len);
      const auto window = stream.subspan(start, opts.seq_len + 1);
      auto tr = forward(w, window.first(opts.seq_len), fo);
      const auto targets = window.subspan(1);
      const std::vector<bool> active(opts.seq_len, true);
      loss += cross_entropy(*tr.logits, targets, active);
      Tensor<float> dl = cross_entropy_backward(*tr.logits, targets, active);
      for (auto& v : dl.values()) v /= static_cast<float>(opts.batch);
      accumulate(acc, backward(w, tr, Upstream<float>{nullptr, &dl}, req));
    }
    loss /= static_cast<double>(opts.batch);
    if (!std::isfinite(loss))
      throw Error(ErrorKind::Training, "pretraining loss is not finite at step " + std::to_string(step));
    res.losses.push_back(loss);
    if (on_step) on_step(step, loss);

    if (cfg.tied) add_inplace(acc.in_emb, acc.out_emb);
    // Gradient slots in the same order as w.named().
    std::vector<Tensor<float>*> grads;
    grads.push_back(&acc.in_emb);
    if (!cfg.tied) grads.push_back(&acc.out_emb);
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
      acc.layers.at(l).visit([&](const char*, Tensor<float>& t) { grads.push_back(&t); });
    grads.push_back(&acc.final_norm);

    if (opts.grad_clip > 0) {
      double sq = 0;
      for (auto* g : grads)
        for (float v : g->values()) sq += static_cast<double>(v) * v;
      const double norm = std::sqrt(sq);
      if (norm > opts.grad_clip) {
        const auto s = static_cast<float>(opts.grad_clip / norm);
        for (auto* g : grads)
          for (auto& v : g->values()) v *= s;
      }
    }
    const double lr = warmup_cosine_lr(opts.lr, step + 1, opts.warmup, opts.steps, 0.1 * opts.lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const bool matrix = params[i].second->rank() == 2;
      adamw_step<float>(params[i].second->values(), grads[i]->values(), states[i], lr,
                        matrix ? decayed : adam);
    }
  }
  return res;
}

}  // namespace vf

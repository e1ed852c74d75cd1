#pragma once

// Loss, optimizer, learning-rate schedule and the training loop: Adam with
// label smoothing, checkpoints on a fixed update cadence, plateau-driven
// learning-rate decay and patience-based early stopping.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "contraseq/errors.hpp"
#include "contraseq/model.hpp"
#include "contraseq/tensor.hpp"

namespace contraseq {

// ---------------------------------------------------------------------------
// Label-smoothed cross entropy
// ---------------------------------------------------------------------------

// Sum (not mean) of per-position losses over non-pad gold positions, plus the
// number of positions counted. The smoothed target distribution is
// q = (1 - eps) * onehot(gold) + eps / V.
template <typename T>
std::pair<TensorT<T>, int64_t> label_smoothed_ce_sum(const TensorT<T>& logits,
                                                     const std::vector<int>& gold, double eps,
                                                     int pad_id) {
  if (logits.rank() != 2)
    throw shape_error("label_smoothed_ce: logits must be rank-2, got " + shape_str(logits.shape()));
  const int64_t n = logits.dim(0), v = logits.dim(1);
  if (static_cast<int64_t>(gold.size()) != n)
    throw shape_error("label_smoothed_ce: " + std::to_string(gold.size()) + " gold ids for " +
                      std::to_string(n) + " logit rows");
  if (eps < 0.0 || eps >= 1.0)
    throw config_error("label_smoothed_ce: smoothing must be in [0,1), got " + std::to_string(eps));
  int64_t counted = 0;
  for (int id : gold) {
    if (id < 0 || id >= v)
      throw vocab_error("label_smoothed_ce: gold id " + std::to_string(id) +
                        " outside vocabulary of size " + std::to_string(v));
    if (id != pad_id) ++counted;
  }
  if (counted == 0) throw contract_error("label_smoothed_ce: all positions are padding");

  const T w_gold = static_cast<T>(1.0 - eps);
  const T w_uniform = static_cast<T>(eps / static_cast<double>(v));
  T total = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (gold[i] == pad_id) continue;
    const T* row = logits.data().data() + i * v;
    T mx = row[0];
    for (int64_t c = 1; c < v; ++c) mx = std::max(mx, row[c]);
    T z = 0, xsum = 0;
    for (int64_t c = 0; c < v; ++c) {
      z += std::exp(row[c] - mx);
      xsum += row[c];
    }
    const T lse = mx + std::log(z);
    // -sum_c q_c log p_c  =  lse - (1-eps) x_gold - eps/V sum_c x_c
    total += lse - w_gold * row[gold[i]] - w_uniform * xsum;
  }

  TensorT<T> loss = TensorT<T>::make_op(
      {1}, {total}, {logits}, [gold, pad_id, v, w_gold, w_uniform](TensorNode<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T g = self.grad[0];
        for (size_t i = 0; i < gold.size(); ++i) {
          if (gold[i] == pad_id) continue;
          const T* row = p.value.data() + static_cast<int64_t>(i) * v;
          T* grow = p.grad.data() + static_cast<int64_t>(i) * v;
          T mx = row[0];
          for (int64_t c = 1; c < v; ++c) mx = std::max(mx, row[c]);
          T z = 0;
          for (int64_t c = 0; c < v; ++c) z += std::exp(row[c] - mx);
          const T inv = T(1) / z;
          for (int64_t c = 0; c < v; ++c) {
            const T prob = std::exp(row[c] - mx) * inv;
            T q = w_uniform;
            if (c == gold[i]) q += w_gold;
            grow[c] += g * (prob - q);
          }
        }
      });
  return {loss, counted};
}

// Mean over non-pad positions, the training-loss form.
template <typename T>
TensorT<T> label_smoothed_ce(const TensorT<T>& logits, const std::vector<int>& gold, double eps,
                             int pad_id) {
  auto [total, counted] = label_smoothed_ce_sum(logits, gold, eps, pad_id);
  return scale(total, static_cast<T>(1.0 / static_cast<double>(counted)));
}

// ---------------------------------------------------------------------------
// Optimizer state and schedule
// ---------------------------------------------------------------------------

struct TrainConfig {
  int64_t batch_tokens = 4096;
  int64_t checkpoint_every = 4000;
  double lr = 0.0002;
  double lr_factor = 0.7;
  int plateau_patience = 8;
  int stop_patience = 32;
  double label_smoothing = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 5.0;  // global-norm clipping; 0 disables
  int64_t max_updates = 0;
  uint64_t seed = 1;
  int threads = 1;         // used for dev-set evaluation fan-out
  double stop_at_ppl = 0;  // stop once dev ppl reaches this; 0 disables

  void validate() const {
    std::string bad;
    auto flag = [&bad](const std::string& f) { bad += bad.empty() ? f : ", " + f; };
    if (batch_tokens < 1) flag("batch_tokens");
    if (checkpoint_every < 1) flag("checkpoint_every");
    if (lr <= 0) flag("lr");
    if (lr_factor <= 0 || lr_factor >= 1) flag("lr_factor (must be in (0,1))");
    if (plateau_patience < 1) flag("plateau_patience");
    if (stop_patience < 1) flag("stop_patience");
    if (label_smoothing < 0 || label_smoothing >= 1) flag("label_smoothing");
    if (clip_norm < 0) flag("clip_norm");
    if (max_updates < 0) flag("max_updates");
    if (threads < 1) flag("threads");
    if (!bad.empty()) throw config_error("invalid train config: " + bad);
  }
};

struct AdamSlot {
  std::vector<float> m, v;
};

struct CheckpointRecord {
  int64_t step = 0;
  double train_loss = 0;
  double dev_ppl = 0;
  double lr = 0;
};

struct TrainState {
  int64_t step = 0;
  double lr = 0;
  std::unordered_map<const void*, AdamSlot> moments;
  double best_ppl = std::numeric_limits<double>::infinity();
  int64_t best_step = -1;
  int checkpoints_since_improvement = 0;  // drives early stopping
  int plateau_counter = 0;                // drives lr decay; resets on cut
  bool stop = false;
  std::vector<CheckpointRecord> checkpoints;
};

// One Adam update with bias correction. The whole gradient map is checked
// for finiteness first; a non-finite gradient aborts the step with the
// parameters and state untouched.
void adam_step(Model& model, const GradientMap& grads, TrainState& state, const TrainConfig& cfg);

// Plateau schedule: an improvement resets both counters; `plateau_patience`
// consecutive non-improvements multiply the learning rate by `lr_factor` and
// reset the plateau counter; `stop_patience` non-improvements raise the stop
// flag. Returns true when the perplexity improved.
bool lr_schedule_update(TrainState& state, double validation_ppl, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct SentencePairIds {
  std::vector<int> src, tgt;  // raw token ids, no BOS/EOS
};
using IdCorpus = std::vector<SentencePairIds>;

// Unsmoothed per-token perplexity over EOS-suffixed targets.
double perplexity(const Model& model, const IdCorpus& corpus, int threads = 1);

struct TrainCallbacks {
  // Invoked after each checkpoint evaluation (model holds current params).
  std::function<void(const Model&, const TrainState&, const CheckpointRecord&, bool improved)>
      on_checkpoint;
};

// Token-bucketed mini-batch training. Deterministic for a fixed seed: batch
// composition, epoch shuffling and dropout all derive from cfg.seed. Returns
// with the model holding the parameters of the best-dev-perplexity
// checkpoint. Divergence (non-finite loss or gradients) restores the best
// checkpoint and raises numeric_error.
TrainState train(Model& model, const IdCorpus& train_corpus, const IdCorpus& dev_corpus,
                 const TrainConfig& cfg, const TrainCallbacks* callbacks = nullptr);

}  // namespace contraseq

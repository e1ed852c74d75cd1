#include "contraseq/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "contraseq/eval.hpp"
#include "contraseq/threading.hpp"

namespace contraseq {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void adam_step(Model& model, const GradientMap& grads, TrainState& state,
               const TrainConfig& cfg) {
  if (!grads.all_finite()) throw numeric_error("adam_step: non-finite gradient, step aborted");
  state.step += 1;  // incremented before bias correction
  const float f_b1 = static_cast<float>(cfg.adam_beta1);
  const float f_b2 = static_cast<float>(cfg.adam_beta2);
  // Bias corrections use the float-rounded betas actually applied to the
  // moments, so the first-step ratio m_hat/sqrt(v_hat) is exactly |g|/|g|.
  const float bias1 = static_cast<float>(
      1.0 - std::pow(static_cast<double>(f_b1), static_cast<double>(state.step)));
  const float bias2 = static_cast<float>(
      1.0 - std::pow(static_cast<double>(f_b2), static_cast<double>(state.step)));
  const float lr = static_cast<float>(state.lr);
  const float eps = static_cast<float>(cfg.adam_eps);

  for (auto& [name, param] : model.params) {
    auto& slot = state.moments[param.node()];
    auto& values = param.mutable_data();
    if (slot.m.empty()) {
      slot.m.assign(values.size(), 0.0f);
      slot.v.assign(values.size(), 0.0f);
    }
    const Tensor* grad = grads.find(param);
    const float* g = grad ? grad->data().data() : nullptr;
    for (size_t i = 0; i < values.size(); ++i) {
      const float gi = g ? g[i] : 0.0f;
      slot.m[i] = f_b1 * slot.m[i] + (1.0f - f_b1) * gi;
      slot.v[i] = f_b2 * slot.v[i] + (1.0f - f_b2) * gi * gi;
      const float m_hat = slot.m[i] / bias1;
      const float v_hat = slot.v[i] / bias2;
      values[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

bool lr_schedule_update(TrainState& state, double validation_ppl, const TrainConfig& cfg) {
  const bool improved = validation_ppl < state.best_ppl;
  if (improved) {
    state.best_ppl = validation_ppl;
    state.plateau_counter = 0;
    state.checkpoints_since_improvement = 0;
  } else {
    state.plateau_counter += 1;
    state.checkpoints_since_improvement += 1;
    if (state.plateau_counter >= cfg.plateau_patience) {
      state.lr *= cfg.lr_factor;
      state.plateau_counter = 0;
    }
    if (state.checkpoints_since_improvement >= cfg.stop_patience) state.stop = true;
  }
  return improved;
}

// ---------------------------------------------------------------------------
// Perplexity
// ---------------------------------------------------------------------------

double perplexity(const Model& model, const IdCorpus& corpus, int threads) {
  if (corpus.empty()) throw data_error("perplexity: empty corpus");
  std::vector<double> nll(corpus.size(), 0.0);
  std::vector<int64_t> tokens(corpus.size(), 0);
  parallel_for(static_cast<int64_t>(corpus.size()), threads, [&](int64_t i) {
    const auto& pair = corpus[static_cast<size_t>(i)];
    nll[static_cast<size_t>(i)] = -score_sentence(model, pair.src, pair.tgt);
    tokens[static_cast<size_t>(i)] = static_cast<int64_t>(pair.tgt.size()) + 1;  // + EOS
  });
  double total_nll = 0;
  int64_t total_tokens = 0;
  for (size_t i = 0; i < corpus.size(); ++i) {
    total_nll += nll[i];
    total_tokens += tokens[i];
  }
  return std::exp(total_nll / static_cast<double>(total_tokens));
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

// Token-bucketed batches: sentences sorted by length, batches filled up to
// batch_tokens source+target tokens (always at least one sentence).
std::vector<std::vector<size_t>> make_batches(const IdCorpus& corpus, int64_t batch_tokens) {
  std::vector<size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&corpus](size_t a, size_t b) {
    const auto la = corpus[a].src.size() + corpus[a].tgt.size();
    const auto lb = corpus[b].src.size() + corpus[b].tgt.size();
    return la < lb;
  });
  std::vector<std::vector<size_t>> batches;
  std::vector<size_t> current;
  int64_t current_tokens = 0;
  for (size_t idx : order) {
    const int64_t cost = static_cast<int64_t>(corpus[idx].src.size() + corpus[idx].tgt.size());
    if (!current.empty() && current_tokens + cost > batch_tokens) {
      batches.push_back(std::move(current));
      current.clear();
      current_tokens = 0;
    }
    current.push_back(idx);
    current_tokens += cost;
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

struct BestSnapshot {
  bool valid = false;
  std::vector<std::vector<float>> values;

  void capture(const Model& model) {
    values.clear();
    values.reserve(model.params.size());
    for (const auto& [name, t] : model.params) values.push_back(t.data());
    valid = true;
  }
  void restore(Model& model) const {
    if (!valid) return;
    for (size_t i = 0; i < model.params.size(); ++i)
      model.params[i].second.mutable_data() = values[i];
  }
};

}  // namespace

TrainState train(Model& model, const IdCorpus& train_corpus, const IdCorpus& dev_corpus,
                 const TrainConfig& cfg, const TrainCallbacks* callbacks) {
  cfg.validate();
  if (train_corpus.empty()) throw data_error("train: empty training corpus");
  if (dev_corpus.empty()) throw data_error("train: empty dev corpus");

  TrainState state;
  state.lr = cfg.lr;
  if (cfg.max_updates == 0) return state;

  const auto batches = make_batches(train_corpus, cfg.batch_tokens);
  const uint64_t dropout_base = mix_seed(cfg.seed, fnv1a64("dropout"));

  BestSnapshot best;
  double loss_accum = 0;
  int64_t updates_since_checkpoint = 0;

  auto run_checkpoint = [&](double mean_loss) {
    const double dev_ppl = perplexity(model, dev_corpus, cfg.threads);
    CheckpointRecord rec{state.step, mean_loss, dev_ppl, state.lr};
    const bool improved = lr_schedule_update(state, dev_ppl, cfg);
    if (improved) {
      best.capture(model);
      state.best_step = state.step;
    }
    state.checkpoints.push_back(rec);
    if (callbacks && callbacks->on_checkpoint)
      callbacks->on_checkpoint(model, state, rec, improved);
    if (cfg.stop_at_ppl > 0 && dev_ppl <= cfg.stop_at_ppl) state.stop = true;
  };

  try {
    for (int64_t epoch = 0; !state.stop && state.step < cfg.max_updates; ++epoch) {
      // Fixed batch contents, shuffled batch order per epoch.
      std::vector<size_t> batch_order(batches.size());
      std::iota(batch_order.begin(), batch_order.end(), size_t{0});
      RngStream shuffle_rng(cfg.seed, "data_order", static_cast<uint64_t>(epoch));
      for (size_t i = batch_order.size(); i > 1; --i)
        std::swap(batch_order[i - 1], batch_order[shuffle_rng.next_below(i)]);

      for (size_t b : batch_order) {
        const auto& batch = batches[b];
        int64_t total_tokens = 0;
        for (size_t idx : batch)
          total_tokens += static_cast<int64_t>(train_corpus[idx].tgt.size()) + 1;

        GradientMap accum;
        double batch_loss = 0;
        for (size_t idx : batch) {
          const auto& pair = train_corpus[idx];
          std::vector<int> target(pair.tgt);
          target.push_back(kEosId);
          RunMode mode;
          mode.train = true;
          mode.dropout_seed =
              mix_seed(mix_seed(dropout_base, static_cast<uint64_t>(state.step)),
                       static_cast<uint64_t>(idx));
          Tensor logits = forward_teacher_forced(model, pair.src, target, mode);
          auto [loss_sum, counted] =
              label_smoothed_ce_sum(logits, target, cfg.label_smoothing, kPadId);
          GradientMap grads = backward(loss_sum);
          accum.add_scaled(grads, 1.0f / static_cast<float>(total_tokens));
          batch_loss += static_cast<double>(loss_sum.item());
        }
        batch_loss /= static_cast<double>(total_tokens);
        if (!std::isfinite(batch_loss))
          throw numeric_error("train: non-finite loss at step " + std::to_string(state.step + 1));

        if (cfg.clip_norm > 0) {
          const double norm = std::sqrt(accum.squared_norm());
          if (norm > cfg.clip_norm)
            accum.scale_all(static_cast<float>(cfg.clip_norm / norm));
        }
        adam_step(model, accum, state, cfg);
        loss_accum += batch_loss;
        updates_since_checkpoint += 1;

        if (state.step % cfg.checkpoint_every == 0) {
          run_checkpoint(loss_accum / static_cast<double>(updates_since_checkpoint));
          loss_accum = 0;
          updates_since_checkpoint = 0;
        }
        if (state.stop || state.step >= cfg.max_updates) break;
      }
    }
    if (updates_since_checkpoint > 0)
      run_checkpoint(loss_accum / static_cast<double>(updates_since_checkpoint));
  } catch (const numeric_error&) {
    // Divergence: keep the last good checkpoint and report the failure.
    best.restore(model);
    throw;
  }

  best.restore(model);
  return state;
}

}  // namespace contraseq

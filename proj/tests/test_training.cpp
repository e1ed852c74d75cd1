#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "contraseq/training.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace contraseq;
using testing::random_tensor;

TEST_CASE("label_smoothed_ce: uniform logits give ln V for any smoothing") {
  Tensor logits = Tensor::zeros({4, 2});
  for (double eps : {0.0, 0.1, 0.5}) {
    Tensor loss = label_smoothed_ce(logits, {1, 0, 1, 1}, eps, -1);
    CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  }
}

TEST_CASE("label_smoothed_ce: eps=0 loss vanishes in the one-hot limit") {
  Tensor logits({1, 3}, {30.0f, 0.0f, 0.0f});
  Tensor loss = label_smoothed_ce(logits, {0}, 0.0, -1);
  CHECK(loss.item() == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("label_smoothed_ce: hand oracle for V=3, eps=0.1, p=(0.7,0.2,0.1)") {
  Tensor logits({1, 3}, {std::log(0.7f), std::log(0.2f), std::log(0.1f)});
  const double eps = 0.1;
  const double q_gold = 1.0 - eps + eps / 3.0;
  const double q_other = eps / 3.0;
  const double expected =
      -(q_gold * std::log(0.7) + q_other * std::log(0.2) + q_other * std::log(0.1));
  Tensor loss = label_smoothed_ce(logits, {0}, eps, -1);
  CHECK(loss.item() == doctest::Approx(expected).epsilon(1e-5));
}

TEST_CASE("label_smoothed_ce: padding rows are excluded, all-pad is an error") {
  RngStream rng(5, "ce.pad");
  Tensor base = random_tensor<float>({2, 5}, rng, 2.0);
  auto [sum2, n2] = label_smoothed_ce_sum(base, {4, 2}, 0.1, kPadId);
  CHECK(n2 == 2);

  // Same logits rows plus pad-labelled rows: identical to the last bit.
  std::vector<float> padded_data(base.data());
  padded_data.insert(padded_data.end(), {1, 2, 3, 4, 5, 5, 4, 3, 2, 1});
  Tensor padded({4, 5}, padded_data);
  auto [sum4, n4] = label_smoothed_ce_sum(padded, {4, 2, kPadId, kPadId}, 0.1, kPadId);
  CHECK(n4 == 2);
  CHECK(sum4.item() == sum2.item());

  CHECK_THROWS_AS(label_smoothed_ce(base, {kPadId, kPadId}, 0.1, kPadId), contract_error);
}

TEST_CASE("teacher-forced loss ignores pads appended after EOS (all families)") {
  for (Family f : {Family::rnn, Family::cnn, Family::transformer, Family::trans_rnn}) {
    ModelConfig cfg;
    cfg.family = f;
    cfg.layers = 2;
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.tie_embeddings = false;
    cfg.src_vocab = 12;
    cfg.tgt_vocab = 12;
    cfg.max_length = 16;
    Model m = build_model(cfg, 21);
    const std::vector<int> src{4, 5, 6};
    std::vector<int> tgt{7, 8, kEosId};
    std::vector<int> padded{7, 8, kEosId, kPadId, kPadId};
    Tensor l1 = forward_teacher_forced(m, src, tgt);
    Tensor l2 = forward_teacher_forced(m, src, padded);
    auto [a, na] = label_smoothed_ce_sum(l1, tgt, 0.1, kPadId);
    auto [b, nb] = label_smoothed_ce_sum(l2, padded, 0.1, kPadId);
    CHECK(na == nb);
    // Differently padded forward passes agree to 1e-5 (matrix kernels may
    // round differently for different shapes); bit-equality holds at the
    // loss level for fixed logits and is checked separately above.
    CHECK(b.item() == doctest::Approx(a.item()).epsilon(1e-5));
  }
}

namespace {

ModelConfig tiny_model_config(int64_t vocab) {
  ModelConfig cfg;
  cfg.family = Family::transformer;
  cfg.layers = 1;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.tie_embeddings = true;
  cfg.src_vocab = vocab;
  cfg.tgt_vocab = vocab;
  cfg.max_length = 32;
  cfg.dropout_embed = 0.0;
  cfg.dropout_block = 0.0;
  return cfg;
}

}  // namespace

TEST_CASE("adam_step: zero gradient leaves parameters unchanged") {
  Model m = build_model(tiny_model_config(8), 1);
  const auto before = m.params[0].second.data();
  TrainState state;
  state.lr = 0.1;
  TrainConfig cfg;
  cfg.lr = 0.1;
  GradientMap empty;
  adam_step(m, empty, state, cfg);
  CHECK(state.step == 1);
  CHECK(m.params[0].second.data() == before);
}

TEST_CASE("adam_step: first-step update is -lr for a unit scalar gradient") {
  Model m = build_model(tiny_model_config(8), 1);
  TrainState state;
  state.lr = 0.1;
  TrainConfig cfg;
  cfg.adam_eps = 1e-12;
  auto& [name, param] = m.params[0];
  const float before = param.data()[0];
  Tensor grad = Tensor::zeros(param.shape());
  grad.mutable_data()[0] = 1.0f;
  GradientMap gm;
  gm.set(param.node(), grad);
  adam_step(m, gm, state, cfg);
  CHECK(param.data()[0] == doctest::Approx(before - 0.1).epsilon(1e-5));
}

TEST_CASE("adam_step: first-step magnitude never exceeds lr") {
  Model m = build_model(tiny_model_config(8), 2);
  TrainState state;
  state.lr = 0.03;
  TrainConfig cfg;
  GradientMap gm;
  RngStream rng(3, "adam.magnitude");
  std::vector<std::vector<float>> before;
  for (auto& [name, param] : m.params) {
    before.push_back(param.data());
    Tensor g = random_tensor<float>(param.shape(), rng, 4.0);
    gm.set(param.node(), g);
  }
  adam_step(m, gm, state, cfg);
  for (size_t p = 0; p < m.params.size(); ++p) {
    const auto& now = m.params[p].second.data();
    for (size_t i = 0; i < now.size(); ++i)
      CHECK(std::abs(now[i] - before[p][i]) <= 0.03 * (1.0 + 1e-6) + 1e-9);
  }
}

TEST_CASE("adam_step: non-finite gradient aborts without touching state") {
  Model m = build_model(tiny_model_config(8), 1);
  TrainState state;
  state.lr = 0.1;
  TrainConfig cfg;
  const auto before = m.params[0].second.data();
  Tensor bad = Tensor::zeros(m.params[0].second.shape());
  bad.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  GradientMap gm;
  gm.set(m.params[0].second.node(), bad);
  CHECK_THROWS_AS(adam_step(m, gm, state, cfg), numeric_error);
  CHECK(state.step == 0);
  CHECK(m.params[0].second.data() == before);
}

TEST_CASE("lr_schedule_update: plateau decay and early stop arithmetic") {
  TrainConfig cfg;  // plateau 8, stop 32, factor 0.7
  TrainState state;
  state.lr = 0.0002;

  // Improvement: lr unchanged, counters reset.
  CHECK(lr_schedule_update(state, 5.0, cfg));
  CHECK(state.lr == 0.0002);
  CHECK(state.plateau_counter == 0);
  CHECK(state.checkpoints_since_improvement == 0);

  // 8 consecutive non-improvements: one decay.
  for (int i = 0; i < 8; ++i) CHECK_FALSE(lr_schedule_update(state, 6.0, cfg));
  CHECK(state.lr == 0.0002 * 0.7);
  CHECK(state.lr == doctest::Approx(0.00014).epsilon(1e-12));

  // 8 more: a second decay, counter reset in between.
  for (int i = 0; i < 8; ++i) CHECK_FALSE(lr_schedule_update(state, 6.0, cfg));
  CHECK(state.lr == 0.0002 * 0.7 * 0.7);
  CHECK(state.lr == doctest::Approx(0.000098).epsilon(1e-9));
  CHECK_FALSE(state.stop);

  // 32 non-improvements in total raise the stop flag.
  for (int i = 0; i < 16; ++i) lr_schedule_update(state, 6.0, cfg);
  CHECK(state.stop);
}

TEST_CASE("perplexity: zeroed output layer gives exactly V") {
  Model m = build_model(tiny_model_config(10), 4);
  for (auto& v : m.out_w.mutable_data()) v = 0.0f;
  for (auto& v : m.out_b.mutable_data()) v = 0.0f;
  IdCorpus corpus{{{4, 5}, {6, 7}}, {{5}, {8, 9, 4}}};
  CHECK(perplexity(m, corpus) == doctest::Approx(10.0).epsilon(1e-5));
}

namespace {

struct TinyTask {
  testing::EncodedTask encoded;
  IdCorpus train_ids, dev_ids;
  ModelConfig model_cfg;
};

TinyTask make_tiny_task(uint64_t seed) {
  SynthTaskConfig cfg;
  cfg.count = 24;
  cfg.seed = seed;
  cfg.d_min = 1;
  cfg.d_max = 4;
  cfg.n_subjects = 2;
  cfg.n_fillers = 6;
  cfg.n_verbs = 2;
  cfg.prefix_max = 1;
  SynthSet set = gen_agreement_set(cfg);
  TinyTask task;
  task.encoded = testing::encode_task(set.corpus);
  task.train_ids = task.encoded.corpus;
  task.dev_ids = IdCorpus(task.encoded.corpus.begin(), task.encoded.corpus.begin() + 8);
  task.model_cfg = tiny_model_config(task.encoded.src_vocab.size());
  return task;
}

}  // namespace

TEST_CASE("train: deterministic metrics for a fixed seed") {
  auto run = [] {
    TinyTask task = make_tiny_task(7);
    Model model = build_model(task.model_cfg, 3);
    TrainConfig tc;
    tc.batch_tokens = 64;
    tc.checkpoint_every = 4;
    tc.max_updates = 12;
    tc.lr = 0.01;
    tc.seed = 3;
    TrainState state = train(model, task.train_ids, task.dev_ids, tc);
    return state;
  };
  TrainState a = run();
  TrainState b = run();
  REQUIRE(a.checkpoints.size() == b.checkpoints.size());
  REQUIRE(a.checkpoints.size() > 0);
  for (size_t i = 0; i < a.checkpoints.size(); ++i) {
    CHECK(a.checkpoints[i].step == b.checkpoints[i].step);
    CHECK(a.checkpoints[i].train_loss == b.checkpoints[i].train_loss);
    CHECK(a.checkpoints[i].dev_ppl == b.checkpoints[i].dev_ppl);
    CHECK(a.checkpoints[i].lr == b.checkpoints[i].lr);
  }
  // lr never increases along the schedule.
  for (size_t i = 1; i < a.checkpoints.size(); ++i)
    CHECK(a.checkpoints[i].lr <= a.checkpoints[i - 1].lr);
}

TEST_CASE("train: returned model matches the best logged checkpoint exactly") {
  TinyTask task = make_tiny_task(9);
  Model model = build_model(task.model_cfg, 5);
  TrainConfig tc;
  tc.batch_tokens = 64;
  tc.checkpoint_every = 3;
  tc.max_updates = 15;
  tc.lr = 0.01;
  tc.seed = 5;
  TrainState state = train(model, task.train_ids, task.dev_ids, tc);
  REQUIRE(!state.checkpoints.empty());
  double best = state.checkpoints[0].dev_ppl;
  for (const auto& rec : state.checkpoints) best = std::min(best, rec.dev_ppl);
  CHECK(perplexity(model, task.dev_ids) == best);
  CHECK(state.best_ppl == best);
}

TEST_CASE("train: max_updates=0 returns the initialized model and no log") {
  TinyTask task = make_tiny_task(11);
  Model model = build_model(task.model_cfg, 1);
  const auto before = model.params[0].second.data();
  TrainConfig tc;
  tc.max_updates = 0;
  TrainState state = train(model, task.train_ids, task.dev_ids, tc);
  CHECK(state.checkpoints.empty());
  CHECK(state.step == 0);
  CHECK(model.params[0].second.data() == before);
}

TEST_CASE("train: empty corpus is a data error") {
  TinyTask task = make_tiny_task(13);
  Model model = build_model(task.model_cfg, 1);
  TrainConfig tc;
  tc.max_updates = 4;
  IdCorpus empty;
  CHECK_THROWS_AS(train(model, empty, task.dev_ids, tc), data_error);
  CHECK_THROWS_AS(train(model, task.train_ids, empty, tc), data_error);
}

TEST_CASE("train: divergence raises numeric_error") {
  TinyTask task = make_tiny_task(17);
  Model model = build_model(task.model_cfg, 2);
  TrainConfig tc;
  tc.batch_tokens = 64;
  tc.checkpoint_every = 1;
  tc.max_updates = 2000;
  tc.lr = 1e18;  // parameters overflow float range within one update
  tc.clip_norm = 0;
  tc.seed = 2;
  CHECK_THROWS_AS(train(model, task.train_ids, task.dev_ids, tc), numeric_error);
}

TEST_CASE("train: loss decreases on a small overfit run") {
  TinyTask task = make_tiny_task(19);
  Model model = build_model(task.model_cfg, 8);
  TrainConfig tc;
  tc.batch_tokens = 128;
  tc.checkpoint_every = 10;
  tc.max_updates = 60;
  tc.lr = 0.01;
  tc.seed = 8;
  TrainState state = train(model, task.train_ids, task.dev_ids, tc);
  REQUIRE(state.checkpoints.size() >= 2);
  CHECK(state.best_ppl < state.checkpoints.front().dev_ppl);
  CHECK(state.checkpoints.back().train_loss < state.checkpoints.front().train_loss);
}

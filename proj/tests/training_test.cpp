#include <gtest/gtest.h>

#include "support.hpp"

using namespace sprc;
using namespace sprc::test;

namespace {


const SyntheticDataset& data() {
  static const SyntheticDataset d = generate_synthetic(small_spec(5));
  return d;
}

Trainer<double> trainer(TrainConfig cfg = toy_config()) {
  return Trainer<double>(cfg, data().corpus, data().triplets, data().vocab.size());
}

std::vector<LossComponents> run(Trainer<double>& tr, int steps) {
  std::vector<LossComponents> out;
  for (int i = 0; i < steps; ++i) out.push_back(tr.train_step());
  return out;
}

void expect_same_trace(const std::vector<LossComponents>& a, const std::vector<LossComponents>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].contrastive, b[i].contrastive) << "step " << i;
    EXPECT_EQ(a[i].alignment, b[i].alignment) << "step " << i;
    EXPECT_EQ(a[i].total, b[i].total) << "step " << i;
    EXPECT_EQ(a[i].lr, b[i].lr) << "step " << i;
  }
}

bool has_prefix(const std::string& s, std::string_view p) { return s.rfind(p, 0) == 0; }

}  // namespace

TEST(CosineLr, Examples) {
  EXPECT_EQ(cosine_lr(0, 100, 0.5), 0.5);
  EXPECT_EQ(cosine_lr(100, 100, 0.5), 0.0);
  EXPECT_NEAR(cosine_lr(50, 100, 0.5), 0.25, 1e-16);
  EXPECT_NEAR(cosine_lr(25, 100, 1.0), 0.5 * (1 + std::sqrt(0.5)), 1e-15);
}

TEST(CosineLr, MonotoneNonIncreasing) {
  for (std::size_t s = 1; s <= 37; ++s) EXPECT_LE(cosine_lr(s, 37, 1e-3), cosine_lr(s - 1, 37, 1e-3));
}

TEST(CosineLr, PastEndClampsWithWarning) {
  WarningCapture w;
  EXPECT_EQ(cosine_lr(101, 100, 0.5), 0.0);
  EXPECT_EQ(w.seen.size(), 1u);
}

TEST(AdamW, FirstStepIsSignedLearningRate) {
  ParamMap<double> p;
  p["a"] = Parameter<double>{Matrix<double>(1, 3, std::vector<double>{1.0, -2.0, 0.5}), {}, false};
  p["a"].grad = Matrix<double>(1, 3, std::vector<double>{0.3, -4.0, 1e-3});
  AdamWState<double> st;
  adamw_step(p, st, 0.1, 0.0);
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
  const double expect[] = {1.0 - 0.1 * 0.3 / (0.3 + 1e-8), -2.0 + 0.1 * 4.0 / (4.0 + 1e-8),
                           0.5 - 0.1 * 1e-3 / (1e-3 + 1e-8)};
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p["a"].value[i], expect[i], 1e-15);
}

// Written out with the textbook recursion for a scalar.
TEST(AdamW, MatchesScalarRecursion) {
  const double lr = 0.01, wd = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const std::vector<double> grads{0.5, -0.2, 0.1, 0.7, -1.5, 0.0, 0.3};
  ParamMap<double> p;
  p["x"] = Parameter<double>{Matrix<double>(1, 1, 2.0), {}, false};
  AdamWState<double> st;
  double x = 2.0, m = 0, v = 0;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const double g = grads[t - 1];
    p["x"].grad = Matrix<double>(1, 1, g);
    adamw_step(p, st, lr, wd);
    x *= 1 - lr * wd;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    x -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    EXPECT_NEAR(p["x"].value[0], x, 1e-14) << "t=" << t;
  }
}

TEST(AdamW, DecoupledDecayShrinksZeroGradientExactly) {
  ParamMap<double> p;
  std::mt19937_64 rng(1);
  p["w"] = Parameter<double>{random_normal<double>(2, 3, rng, 1.0), {}, false};
  AdamWState<double> st;
  for (int step = 0; step < 10; ++step) {
    const double lr = cosine_lr(step, 10, 0.02);
    Matrix<double> before = p["w"].value;
    p["w"].grad = Matrix<double>(2, 3);
    adamw_step(p, st, lr, 0.05);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(p["w"].value[i], before[i] * (1 - lr * 0.05));
  }
}

TEST(AdamW, SkipsFrozen) {
  ParamMap<double> p;
  p["f"] = Parameter<double>{Matrix<double>(1, 2, 1.0), {}, true};
  AdamWState<double> st;
  adamw_step(p, st, 0.1, 0.5);
  EXPECT_EQ(p["f"].value, Matrix<double>(1, 2, 1.0));
  EXPECT_TRUE(st.m.empty());
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
  ParamMap<double> p;
  p["a"] = Parameter<double>{Matrix<double>(1, 2), Matrix<double>(1, 2, std::vector<double>{3, 0}), false};
  p["b"] = Parameter<double>{Matrix<double>(1, 1), Matrix<double>(1, 1, 4.0), false};
  p["f"] = Parameter<double>{Matrix<double>(1, 1), Matrix<double>(1, 1, 100.0), true};
  EXPECT_EQ(clip_grad_norm(p, 1.0), 5.0);
  EXPECT_NEAR(p["a"].grad[0], 0.6, 1e-15);
  EXPECT_NEAR(p["b"].grad[0], 0.8, 1e-15);
  EXPECT_EQ(p["f"].grad[0], 100.0);
  EXPECT_NEAR(clip_grad_norm(p, 1.0), 1.0, 1e-15);
  EXPECT_NEAR(p["b"].grad[0], 0.8, 1e-15);
}

TEST(ClipGradNorm, ZeroDisables) {
  ParamMap<double> p;
  p["a"] = Parameter<double>{Matrix<double>(1, 1), Matrix<double>(1, 1, 7.0), false};
  EXPECT_EQ(clip_grad_norm(p, 0.0), 7.0);
  EXPECT_EQ(p["a"].grad[0], 7.0);
}

// m^T s_0 + (1 - m) sum_t m^(T-1-t) theta_t; dyadic values keep it exact.
TEST(Ema, ClosedFormForScalar) {
  const double m = 0.5;
  ParamMap<double> shadow, live;
  shadow["text/x"] = Parameter<double>{Matrix<double>(1, 1, 8.0), {}, true};
  live["text/x"] = Parameter<double>{Matrix<double>(1, 1), {}, false};
  const std::vector<double> thetas{1, -3, 2, 5, 0, 4, -1, 6};
  for (double th : thetas) {
    live["text/x"].value[0] = th;
    apply_ema(shadow, live, m);
  }
  const std::size_t T = thetas.size();
  double closed = std::pow(m, double(T)) * 8.0;
  for (std::size_t t = 0; t < T; ++t) closed += (1 - m) * std::pow(m, double(T - 1 - t)) * thetas[t];
  EXPECT_EQ(shadow["text/x"].value[0], closed);
}

TEST(Trainer, ConstructionErrors) {
  auto cfg = toy_config();
  cfg.batch_size = data().triplets.size() + 1;
  EXPECT_THROW(trainer(cfg), ConfigError);
  auto tr = trainer();
  std::vector<Triplet> two(data().triplets.begin(), data().triplets.begin() + 2);
  EXPECT_THROW(tr.train_step(two), StructuralError);
}

TEST(Trainer, EmaFollowsEveryStep) {
  auto cfg = toy_config();
  cfg.ema_decay = 0.9;
  auto tr = trainer(cfg);
  for (int s = 0; s < 3; ++s) {
    ParamMap<double> before = tr.ema();
    tr.train_step();
    for (const auto& [name, p] : tr.ema()) {
      const auto& live = tr.model().value(name);
      for (std::size_t i = 0; i < p.value.size(); ++i)
        ASSERT_EQ(p.value[i], 0.9 * before.at(name).value[i] + (1 - 0.9) * live[i]) << name;
    }
  }
}

TEST(Trainer, NoGradientLeaks) {
  auto tr = trainer();
  for (int s = 0; s < 3; ++s) {
    auto l = tr.train_step();
    EXPECT_GT(l.alignment, 0.0);
    const auto& d = tr.diagnostics();
    ASSERT_EQ(d.aux_prompt_grads.size(), tr.config().batch_size);
    for (const auto& g : d.aux_prompt_grads)
      for (double v : g.flat()) ASSERT_EQ(v, 0.0);
    for (const auto& [name, p] : tr.ema())
      for (double v : p.grad.flat()) ASSERT_EQ(v, 0.0) << name;
  }
}

TEST(Trainer, FrozenParametersNeverMove) {
  for (auto mech : {Mechanism::Sprc, Mechanism::LateFusion, Mechanism::TextInversion, Mechanism::FixedPrompt}) {
    auto cfg = toy_config();
    cfg.mechanism = mech;
    auto tr = trainer(cfg);
    const ParamMap<double> before = tr.model().params;
    run(tr, 4);
    std::size_t moved = 0;
    for (const auto& [name, p] : tr.model().params) {
      const bool same = p.value == before.at(name).value;
      if (p.frozen) EXPECT_TRUE(same) << to_string(mech) << " " << name;
      if (mech != Mechanism::Sprc && has_prefix(name, "prompt_gen/")) EXPECT_TRUE(same) << to_string(mech) << " " << name;
      moved += !same;
    }
    EXPECT_GT(moved, 0u) << to_string(mech);
  }
}

TEST(Trainer, ZeroGammaIsPureContrastive) {
  auto cfg = toy_config();
  cfg.gamma = 0;
  cfg.aux.inner_steps = 0;
  auto tr = trainer(cfg);
  for (const auto& l : run(tr, 3)) {
    EXPECT_EQ(l.alignment, 0.0);
    EXPECT_EQ(l.total, l.contrastive);
  }
}

TEST(Trainer, LossTotalCombinesComponents) {
  auto tr = trainer();
  for (const auto& l : run(tr, 3)) EXPECT_NEAR(l.total, l.contrastive + 0.8 * l.alignment, 1e-12);
}

TEST(Trainer, DeterministicTraces) {
  auto a = trainer(), b = trainer();
  expect_same_trace(run(a, 20), run(b, 20));
  EXPECT_EQ(a.serialize(), b.serialize());
}

TEST(Trainer, SeedChangesTrace) {
  auto cfg = toy_config();
  cfg.seed = 1;
  auto a = trainer(), b = trainer(cfg);
  EXPECT_NE(run(a, 1)[0].total, run(b, 1)[0].total);
}

TEST(Trainer, FixedBatchLossDecreases) {
  auto cfg = toy_config();
  cfg.lr = 1e-3;
  cfg.steps = 50;
  auto tr = trainer(cfg);
  std::vector<Triplet> batch(data().triplets.begin(), data().triplets.begin() + 3);
  const double first = tr.train_step(batch).total;
  double last = first;
  for (int s = 1; s < 50; ++s) last = tr.train_step(batch).total;
  EXPECT_LT(last, first);
}

TEST(Trainer, NonFiniteLossReportsStep) {
  auto tr = trainer();
  run(tr, 2);
  tr.model().params.at("text/proj").value[0] = std::nan("");
  try {
    tr.train_step();
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.step(), 2);
  }
}

TEST(Checkpoint, ResumeMatchesUninterrupted) {
  auto whole = trainer();
  auto full = run(whole, 15);
  auto first = trainer();
  auto head = run(first, 5);
  auto resumed = Trainer<double>::deserialize(first.serialize(), data().corpus, data().triplets);
  EXPECT_EQ(resumed.step(), 5u);
  auto tail = run(resumed, 10);
  head.insert(head.end(), tail.begin(), tail.end());
  expect_same_trace(head, full);
  EXPECT_EQ(resumed.serialize(), whole.serialize());
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  auto dir = temp_dir("ckpt");
  auto tr = trainer();
  run(tr, 3);
  tr.save(dir / "a.bin");
  auto back = Trainer<double>::load(dir / "a.bin", data().corpus, data().triplets);
  back.save(dir / "b.bin");
  EXPECT_EQ(io::read_file(dir / "a.bin"), io::read_file(dir / "b.bin"));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, HeaderAndModelOnlyLoad) {
  auto dir = temp_dir("ckpt_model");
  auto cfg = toy_config();
  cfg.mechanism = Mechanism::TextInversion;
  auto tr = trainer(cfg);
  run(tr, 2);
  tr.save(dir / "c.bin");
  auto h = read_checkpoint_header(dir / "c.bin");
  EXPECT_EQ(h.at("step").get<std::size_t>(), 2u);
  EXPECT_EQ(h.at("dtype").get<std::string>(), "f64");
  EXPECT_EQ(config_map(config_from_header(h)), config_map(tr.config()));
  auto m = load_model<double>(dir / "c.bin");
  ASSERT_EQ(m.params.size(), tr.model().params.size());
  for (const auto& [name, p] : tr.model().params) {
    EXPECT_EQ(m.params.at(name).value, p.value) << name;
    EXPECT_EQ(m.params.at(name).frozen, p.frozen) << name;
  }
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, SinglePrecisionRoundTrip) {
  TrainConfig cfg = toy_config();
  Trainer<float> tr(cfg, data().corpus, data().triplets, data().vocab.size());
  tr.train_step();
  const std::string bytes = tr.serialize();
  auto back = Trainer<float>::deserialize(bytes, data().corpus, data().triplets);
  EXPECT_EQ(back.serialize(), bytes);
  EXPECT_TRUE(std::isfinite(back.train_step().total));
}

TEST(Checkpoint, CorruptInputs) {
  auto tr = trainer();
  const std::string good = tr.serialize();
  EXPECT_THROW(Trainer<double>::deserialize(good.substr(0, good.size() - 5), data().corpus, data().triplets),
               LengthError);
  EXPECT_THROW(Trainer<double>::deserialize(good + "xx", data().corpus, data().triplets), FormatError);
  std::string magic = good;
  magic[0] = 'X';
  EXPECT_THROW(Trainer<double>::deserialize(magic, data().corpus, data().triplets), FormatError);
  std::string version = good;
  version[8] = 7;
  try {
    Trainer<double>::deserialize(version, data().corpus, data().triplets);
    FAIL() << "expected a format error";
  } catch (const FormatError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("7"), std::string::npos) << what;
    EXPECT_NE(what.find("1"), std::string::npos) << what;
  }
  EXPECT_THROW(Trainer<double>::deserialize(good.substr(0, 4), data().corpus, data().triplets), FormatError);
}

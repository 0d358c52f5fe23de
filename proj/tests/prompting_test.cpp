#include <gtest/gtest.h>

#include "support.hpp"

using namespace sprc;
using sprc::test::WarningCapture;

namespace {

ModelConfig small_model(std::size_t lp = 4) {
  ModelConfig c;
  c.vocab_size = 12;
  c.d_img = 6;
  c.d_model = 8;
  c.d_embed = 8;
  c.d_ff = 16;
  c.n_heads = 2;
  c.prompt_length = lp;
  c.max_caption_len = 4;
  c.inversion_hidden = 8;
  return c;
}

Matrix<double> random_states(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_normal<double>(n, 8, rng, 1.0);
}

TokenSequence tokens(std::initializer_list<TokenId> ids) { return TokenSequence{std::vector<TokenId>(ids)}; }

Matrix<double> permute_rows(const Matrix<double>& m, const std::vector<std::size_t>& order) {
  Matrix<double> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < order.size(); ++i)
    std::copy(m.row(order[i]).begin(), m.row(order[i]).end(), out.row(i).begin());
  return out;
}

}  // namespace

TEST(PromptGenerator, OutputShapeAndFinite) {
  auto m = make_model<double>(small_model(4), 1);
  for (auto mode : {PromptMode::Full, PromptMode::RcOnly, PromptMode::RiOnly}) {
    auto p = generate_prompt(random_states(3, 2), tokens({1, 5, 9}), m, mode);
    EXPECT_EQ(p.rows(), 4u);
    EXPECT_EQ(p.cols(), 8u);
    EXPECT_TRUE(all_finite(p));
  }
}

TEST(PromptGenerator, RcOnlyIgnoresImage) {
  auto m = make_model<double>(small_model(), 1);
  EXPECT_EQ(generate_prompt(random_states(3, 2), tokens({1, 5, 9}), m, PromptMode::RcOnly),
            generate_prompt(random_states(3, 3), tokens({1, 5, 9}), m, PromptMode::RcOnly));
}

TEST(PromptGenerator, RiOnlyIgnoresCaption) {
  auto m = make_model<double>(small_model(), 1);
  auto s = random_states(3, 2);
  EXPECT_EQ(generate_prompt(s, tokens({1, 5, 9}), m, PromptMode::RiOnly),
            generate_prompt(s, tokens({2, 6, 10}), m, PromptMode::RiOnly));
}

TEST(PromptGenerator, FullModeDependsOnBothInputs) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto m = make_model<double>(small_model(), seed);
    auto s = random_states(3, seed + 100);
    auto base = generate_prompt(s, tokens({1, 5, 9}), m, PromptMode::Full);
    EXPECT_GT(max_abs_diff(base, generate_prompt(s, tokens({1, 6, 9}), m, PromptMode::Full)), 0.0);
    auto s2 = s;
    s2(0, 0) += 0.25;
    EXPECT_GT(max_abs_diff(base, generate_prompt(s2, tokens({1, 5, 9}), m, PromptMode::Full)), 0.0);
  }
}

TEST(PromptGenerator, PatchPermutationInvariance) {
  auto m = make_model<double>(small_model(), 3);
  auto s = random_states(4, 7);
  std::vector<std::size_t> order{0, 1, 2, 3};
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 6; ++trial) {
    std::shuffle(order.begin(), order.end(), rng);
    for (auto mode : {PromptMode::Full, PromptMode::RiOnly})
      EXPECT_EQ(generate_prompt(s, tokens({3, 4}), m, mode), generate_prompt(permute_rows(s, order), tokens({3, 4}), m, mode));
  }
}

TEST(PromptGenerator, QueryCountMismatchIsStructural) {
  auto m = make_model<double>(small_model(4), 1);
  auto cfg = m.cfg;
  cfg.prompt_length = 3;
  Tape<double> tape;
  Bound<double> P(tape, m.params);
  EXPECT_THROW(generate_prompt(P, random_states(2, 1), tokens({1}), cfg, PromptMode::Full), StructuralError);
}

TEST(ComposeQuery, LengthsAndOverflow) {
  auto q = compose_query(Matrix<double>(2, 8), tokens({1, 2, 3}));
  EXPECT_EQ(q.length(), 5u);
  EXPECT_EQ(compose_query(Matrix<double>(0, 8), tokens({1})).length(), 1u);
  EXPECT_THROW(compose_query(Matrix<double>(2, 8), tokens({1, 2, 3}), 4), LengthError);
}

TEST(ComposeQuery, ComposeThenEncodeMatchesManualConcatenation) {
  auto m = make_model<double>(small_model(), 5);
  auto states = random_states(3, 1);
  auto cap = tokens({2, 7});
  auto p = generate_prompt(states, cap, m, PromptMode::Full);
  auto composed = encode_text(compose_query(p, cap), m);

  // manual: stack prompt rows and token embeddings, add positions, then run
  // the encoder blocks on the assembled matrix
  const auto& emb = m.value("text/tok_emb");
  const auto& pos = m.value("text/pos_emb");
  Matrix<double> x(p.rows() + cap.size(), 8);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < 8; ++c)
      x(r, c) = (r < p.rows() ? p(r, c) : emb(cap.ids[r - p.rows()], c)) + pos(r, c);
  Tape<double> tape;
  Bound<double> P(tape, static_cast<const ParamMap<double>&>(m.params));
  Var<double> h = tape.constant(x);
  for (std::size_t l = 0; l < m.cfg.n_layers_text; ++l)
    h = transformer_block(P, "text/blk" + std::to_string(l) + "/", h, m.cfg.n_heads);
  auto manual = ad::l2_normalize_rows(ad::matmul(ad::mean_rows(h), P("text/proj"))).value();
  EXPECT_LT(max_abs_diff(composed, manual), 1e-14);
}

TEST(LateFusion, SelfSumIsIdentity) {
  auto m = make_model<double>(small_model(), 2);
  auto cap = tokens({1, 2});
  auto text = encode_text(compose_query(Matrix<double>(0, 8), cap), m);
  Tape<double> tape;
  Bound<double> P(tape, m.params);
  auto out = late_fusion_embed(P, text, cap, m.cfg).value();
  EXPECT_LT(max_abs_diff(out, text), 1e-12);
}

TEST(LateFusion, AntipodeFallsBackWithWarning) {
  auto m = make_model<double>(small_model(), 2);
  auto cap = tokens({1, 2});
  auto text = encode_text(compose_query(Matrix<double>(0, 8), cap), m);
  Matrix<double> neg = text;
  for (auto& v : neg.flat()) v = -v;
  WarningCapture w;
  Tape<double> tape;
  Bound<double> P(tape, m.params);
  auto out = late_fusion_embed(P, neg, cap, m.cfg).value();
  EXPECT_EQ(out, text);
  EXPECT_EQ(w.seen.size(), 1u);
}

TEST(LateFusion, UnitNormForRandomInputs) {
  auto m = make_model<double>(small_model(), 2);
  std::mt19937_64 rng(4);
  for (int i = 0; i < 5; ++i) {
    auto ref = test::random_unit_rows(1, 8, rng);
    Tape<double> tape;
    Bound<double> P(tape, m.params);
    EXPECT_NEAR(l2_norm<double>(late_fusion_embed(P, ref, tokens({3}), m.cfg).value().flat()), 1.0, 1e-12);
  }
}

TEST(TextualInversion, EqualsEncodeWithOneTokenPrompt) {
  auto m = make_model<double>(small_model(), 3);
  std::mt19937_64 rng(1);
  auto ref = test::random_unit_rows(1, 8, rng);
  auto cap = tokens({4, 5});
  Tape<double> tape;
  Bound<double> P(tape, m.params);
  auto token = inversion_token(P, ref).value();
  EXPECT_EQ(token.rows(), 1u);
  auto out = textual_inversion_embed(P, ref, cap, m.cfg).value();
  EXPECT_EQ(out, encode_text(compose_query(token, cap), m));
}

TEST(TextualInversion, ZeroWeightsGiveBiasToken) {
  auto m = make_model<double>(small_model(), 3);
  m.params.at("inversion/w1").value.fill(0);
  m.params.at("inversion/w2").value.fill(0);
  std::mt19937_64 rng(2);
  m.params.at("inversion/b2").value = random_normal<double>(1, 8, rng, 1.0);
  for (int i = 0; i < 3; ++i) {
    Tape<double> tape;
    Bound<double> P(tape, m.params);
    EXPECT_EQ(inversion_token(P, test::random_unit_rows(1, 8, rng)).value(), m.value("inversion/b2"));
  }
}

TEST(TextualInversion, ReferenceChangesOutput) {
  auto m = make_model<double>(small_model(), 3);
  std::mt19937_64 rng(3);
  auto a = test::random_unit_rows(1, 8, rng), b = test::random_unit_rows(1, 8, rng);
  Tape<double> tape;
  Bound<double> P(tape, m.params);
  EXPECT_GT(max_abs_diff(textual_inversion_embed(P, a, tokens({1}), m.cfg).value(),
                         textual_inversion_embed(P, b, tokens({1}), m.cfg).value()),
            0.0);
}

TEST(FixedPrompt, IndependentOfReference) {
  auto m = make_model<double>(small_model(), 4, Mechanism::FixedPrompt);
  std::mt19937_64 rng(5);
  auto s1 = random_states(3, 1), s2 = random_states(3, 2);
  auto r1 = test::random_unit_rows(1, 8, rng), r2 = test::random_unit_rows(1, 8, rng);
  Tape<double> tape;
  Bound<double> P(tape, m.params);
  auto a = query_embedding(P, {&s1, &r1}, tokens({1, 2}), m.cfg, Mechanism::FixedPrompt, PromptMode::Full);
  auto b = query_embedding(P, {&s2, &r2}, tokens({1, 2}), m.cfg, Mechanism::FixedPrompt, PromptMode::Full);
  EXPECT_EQ(a.embedding.value(), b.embedding.value());
  EXPECT_EQ(a.embedding.value(), encode_text(compose_query(m.value("static_prompt/tokens"), tokens({1, 2})), m));
}

TEST(FixedPrompt, ZeroLengthIsPureText) {
  auto m = make_model<double>(small_model(0), 4, Mechanism::FixedPrompt);
  EXPECT_EQ(m.params.count("static_prompt/tokens"), 0u);
  Tape<double> tape;
  Bound<double> P(tape, m.params);
  EXPECT_EQ(fixed_prompt_embed(P, tokens({3}), m.cfg).value(), encode_text(compose_query(Matrix<double>(0, 8), tokens({3})), m));
}

TEST(FixedPrompt, ContrastiveGradientReachesStaticPrompt) {
  auto m = make_model<double>(small_model(), 6, Mechanism::FixedPrompt);
  // only the static prompt is checked; everything else is held fixed
  for (auto& [name, p] : m.params) p.frozen = name != "static_prompt/tokens";
  std::mt19937_64 rng(7);
  const auto V = test::random_unit_rows(3, 8, rng);
  const std::vector<TokenSequence> caps{tokens({1, 2}), tokens({3}), tokens({4, 5, 6})};
  auto loss = [&](Tape<double>& tape) {
    Bound<double> P(tape, m.params);
    std::vector<Var<double>> us;
    for (const auto& c : caps) us.push_back(fixed_prompt_embed(P, c, m.cfg));
    return contrastive_loss(ad::concat_rows(us), tape.constant(V), tape.constant(Matrix<double>(1, 1, 5.0)));
  };
  zero_grads(m.params);
  {
    Tape<double> tape;
    tape.backward(loss(tape));
  }
  double gnorm = 0;
  for (double g : m.params.at("static_prompt/tokens").grad.flat()) gnorm += g * g;
  EXPECT_GT(gnorm, 0.0);
  auto r = test::finite_difference_check(m.params, [&] {
    Tape<double> tape;
    return loss(tape).scalar();
  });
  EXPECT_EQ(r.checked, m.value("static_prompt/tokens").size());
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Mechanisms, NamesRoundTrip) {
  for (auto m : {Mechanism::Sprc, Mechanism::LateFusion, Mechanism::TextInversion, Mechanism::FixedPrompt})
    EXPECT_EQ(parse_mechanism(to_string(m)), m);
  for (auto m : {PromptMode::Full, PromptMode::RcOnly, PromptMode::RiOnly}) EXPECT_EQ(parse_prompt_mode(to_string(m)), m);
  EXPECT_THROW(parse_mechanism("CLIP"), ConfigError);
  EXPECT_THROW(parse_prompt_mode("BOTH"), ConfigError);
}

TEST(Mechanisms, UnusedSubnetsAreFrozen) {
  auto sprc = make_model<double>(small_model(), 1, Mechanism::Sprc);
  EXPECT_FALSE(sprc.params.at("prompt_gen/query").frozen);
  EXPECT_TRUE(sprc.params.at("inversion/w1").frozen);
  EXPECT_TRUE(sprc.params.at("static_prompt/tokens").frozen);
  auto lf = make_model<double>(small_model(), 1, Mechanism::LateFusion);
  EXPECT_TRUE(lf.params.at("prompt_gen/query").frozen);
  EXPECT_FALSE(lf.params.at("text/proj").frozen);
}

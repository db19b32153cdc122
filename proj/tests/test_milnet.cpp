#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "amil/bagdata.hpp"
#include "amil/checkpoint.hpp"
#include "amil/milnet.hpp"
#include "amil/trainer.hpp"
#include "test_support.hpp"

namespace ag = amil::autograd;
namespace bd = amil::bagdata;
namespace mn = amil::milnet;
using amil::Rng;

namespace {

using Mat = std::vector<std::vector<double>>;

// Plain-loop reference of the full model for one bag.
struct Reference {
  const ag::ParameterSet& p;
  const mn::ModelConfig& c;

  double w(const std::string& name, std::size_t i, std::size_t j) const {
    const auto& t = p.at(name);
    return t[i * t.extent(1) + j];
  }
  double v(const std::string& name, std::size_t i) const { return p.at(name)[i]; }

  Mat affine(const Mat& x, const std::string& weight, const std::string* bias = nullptr) const {
    const auto& t = p.at(weight);
    Mat out(x.size(), std::vector<double>(t.extent(1), 0.0));
    for (std::size_t r = 0; r < x.size(); ++r) {
      for (std::size_t j = 0; j < t.extent(1); ++j) {
        double s = bias ? v(*bias, j) : 0.0;
        for (std::size_t k = 0; k < t.extent(0); ++k) s += x[r][k] * w(weight, k, j);
        out[r][j] = s;
      }
    }
    return out;
  }

  static std::vector<double> softmax(const std::vector<double>& s) {
    const double mx = *std::max_element(s.begin(), s.end());
    std::vector<double> e(s.size());
    double z = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) z += e[i] = std::exp(s[i] - mx);
    for (double& x : e) x /= z;
    return e;
  }

  std::pair<double, std::vector<double>> run(const std::vector<std::size_t>& ids) const {
    const std::size_t d = c.d_model, n = ids.size();
    Mat x(n, std::vector<double>(d));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) x[i][j] = w("embedding", ids[i], j);
    }
    if (c.num_heads > 0) {
      const std::size_t dk = d / c.num_heads;
      Mat joined(n, std::vector<double>(c.num_heads * dk));
      for (std::size_t h = 0; h < c.num_heads; ++h) {
        const std::string pre = "attn.head" + std::to_string(h) + ".";
        auto q = affine(x, pre + "query"), k = affine(x, pre + "key"), val = affine(x, pre + "value");
        for (std::size_t i = 0; i < n; ++i) {
          std::vector<double> s(n);
          for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t t = 0; t < dk; ++t) s[j] += q[i][t] * k[j][t];
            s[j] /= std::sqrt(static_cast<double>(dk));
          }
          auto a = softmax(s);
          for (std::size_t t = 0; t < dk; ++t) {
            for (std::size_t j = 0; j < n; ++j) joined[i][h * dk + t] += a[j] * val[j][t];
          }
        }
      }
      auto proj = affine(joined, "attn.output");
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> r(d);
        double mean = 0.0, var = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += r[j] = x[i][j] + proj[i][j];
        mean /= static_cast<double>(d);
        for (double e : r) var += (e - mean) * (e - mean);
        var /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
          x[i][j] = (r[j] - mean) / std::sqrt(var + 1e-5) * v("attn.norm.gain", j) + v("attn.norm.bias", j);
        }
      }
    }
    Mat h = x;
    for (std::size_t s = 0; s < c.fc_dims.size(); ++s) {
      const std::string bias = "ffn" + std::to_string(s) + ".bias";
      h = affine(h, "ffn" + std::to_string(s) + ".weight", &bias);
      for (auto& row : h) {
        for (double& e : row) e = std::max(0.0, e);
      }
    }
    const std::size_t m = c.instance_dim();
    std::vector<double> z_sap(m);
    for (std::size_t j = 0; j < m; ++j) {
      double mx = -1e300, sum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        mx = std::max(mx, h[i][j]);
        sum += h[i][j];
      }
      double lse = 0.0;
      for (std::size_t i = 0; i < n; ++i) lse += std::exp(h[i][j] - mx);
      lse = mx + std::log(lse);
      const double views[4] = {mx, sum / static_cast<double>(n), sum, lse};
      for (std::size_t k = 0; k < 4; ++k) z_sap[j] += views[k] * v("pool.view_weights", k);
    }
    auto t2 = affine(h, "gate.w2"), t3 = affine(h, "gate.w3");
    std::vector<double> score(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        score[i] += std::tanh(t2[i][j]) * (1.0 / (1.0 + std::exp(-t3[i][j]))) * v("gate.w1", j);
      }
    }
    auto a = softmax(score);
    std::vector<double> z_att(m);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) z_att[j] += a[i] * h[i][j];
    }
    double logit = v("score.bias", 0);
    for (std::size_t j = 0; j < m; ++j) logit += z_att[j] * v("score.weight", j) + z_sap[j] * v("score.weight", m + j);
    const double prob = std::clamp(1.0 / (1.0 + std::exp(-logit)), 1e-7, 1.0 - 1e-7);
    return {prob, a};
  }
};

struct Fixture {
  std::vector<bd::Bag> bags;
  bd::Vocabulary vocab;
  mn::ModelConfig config;
  ag::ParameterSet params;
};

Fixture make_fixture(std::uint64_t seed, std::size_t d_model = 16, std::size_t heads = 4,
                     std::vector<std::size_t> fc = {12, 8}, std::size_t num_bags = 40) {
  Fixture f;
  f.bags = bd::synth_generate({.num_bags = num_bags, .vocab_size = 30, .num_witness_tokens = 3,
                               .positive_rate = 0.3, .min_length = 1, .max_length = 9, .seed = seed})
               .bags;
  f.vocab = bd::build_vocab(f.bags);
  f.config.vocab_size = f.vocab.table_rows();
  f.config.d_model = d_model;
  f.config.num_heads = heads;
  f.config.fc_dims = std::move(fc);
  f.params = mn::init_params(f.config, seed);
  // Non-trivial layer-norm and bias values so the reference checks them.
  Rng rng(seed + 100);
  for (auto& prm : f.params) {
    if (prm.name.find("bias") != std::string::npos || prm.name.find("norm.gain") != std::string::npos) {
      for (double& x : prm.value.mutable_data()) x += rng.uniform(-0.3, 0.3);
    }
  }
  return f;
}

double prob_of(const Fixture& f, const std::vector<bd::Bag>& bags, std::size_t row) {
  std::vector<std::size_t> sel(bags.size());
  std::iota(sel.begin(), sel.end(), 0);
  return mn::predict(bd::make_batch(bags, sel, f.vocab), f.params, f.config).at(row);
}

}  // namespace

TEST(Config, ValidationAndHeadDivisibility) {
  mn::ModelConfig c;
  c.vocab_size = 10;
  c.d_model = 10;
  c.num_heads = 4;
  EXPECT_THROW(c.validate(), amil::ConfigError);
  c.num_heads = 5;
  EXPECT_NO_THROW(c.validate());
  c.fc_dims.clear();
  EXPECT_THROW(c.validate(), amil::ConfigError);
}

TEST(Layout, NamesShapesAndPadRow) {
  auto f = make_fixture(1, 8, 2, {6, 4});
  std::vector<std::string> names;
  for (const auto& p : f.params) names.push_back(p.name);
  EXPECT_EQ(names, (std::vector<std::string>{"embedding", "attn.head0.query", "attn.head0.key", "attn.head0.value",
                                             "attn.head1.query", "attn.head1.key", "attn.head1.value", "attn.output",
                                             "attn.norm.gain", "attn.norm.bias", "ffn0.weight", "ffn0.bias",
                                             "ffn1.weight", "ffn1.bias", "pool.view_weights", "gate.w1", "gate.w2",
                                             "gate.w3", "score.weight", "score.bias"}));
  EXPECT_EQ(f.params.at("attn.head1.query").shape(), (ag::Shape{8, 4}));
  EXPECT_EQ(f.params.at("score.weight").shape(), (ag::Shape{8, 1}));
  EXPECT_EQ(f.params.at("pool.view_weights").shape(), (ag::Shape{4, 1}));
  const auto& emb = f.params.at("embedding");
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(emb[j], 0.0);
}

TEST(Forward, MatchesPlainLoopReference) {
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    for (std::size_t heads : {0u, 1u, 2u, 4u}) {
      auto f = make_fixture(seed, 8, heads, {6, 4});
      Reference ref{f.params, f.config};
      std::vector<std::size_t> sel(f.bags.size());
      std::iota(sel.begin(), sel.end(), 0);
      const auto batch = bd::make_batch(f.bags, sel, f.vocab);
      ag::Tape tape = ag::Tape::no_grad();
      auto out = mn::forward(tape, batch, f.params, f.config);
      for (std::size_t b = 0; b < f.bags.size(); ++b) {
        std::vector<std::size_t> ids;
        for (const auto& t : f.bags[b].tokens) ids.push_back(f.vocab.id(t));
        auto [p, a] = ref.run(ids);
        EXPECT_NEAR(out.probabilities[b], p, 1e-10) << "heads " << heads << " bag " << b;
        for (std::size_t j = 0; j < ids.size(); ++j) EXPECT_NEAR((*out.attention)[b * batch.width + j], a[j], 1e-10);
      }
    }
  }
}

TEST(Forward, PermutationInvariance) {
  auto f = make_fixture(7, 16, 4, {12, 8}, 100);
  Rng rng(70);
  for (std::size_t b = 0; b < f.bags.size(); ++b) {
    std::vector<bd::Bag> one{f.bags[b]};
    const double p0 = prob_of(f, one, 0);
    rng.shuffle(std::span(one[0].tokens));
    EXPECT_NEAR(prob_of(f, one, 0), p0, 1e-9);
  }
}

TEST(Forward, PadInertnessAndBatchingIndependence) {
  auto f = make_fixture(8, 16, 4, {12, 8}, 60);
  Rng rng(80);
  for (std::size_t b = 0; b < f.bags.size(); ++b) {
    const double alone = prob_of(f, {f.bags[b]}, 0);
    // A companion bag 1..16 tokens longer forces that many pad slots.
    bd::Bag longer{"long", f.bags[b].tokens, 0};
    const std::size_t extra = 1 + rng.index(16);
    for (std::size_t i = 0; i < extra; ++i) longer.tokens.push_back(f.vocab.tokens()[rng.index(f.vocab.size())]);
    EXPECT_NEAR(prob_of(f, {f.bags[b], longer}, 0), alone, 1e-9);
  }
  // Width-5 batch vs the same bags inside a width-17 batch.
  std::vector<bd::Bag> narrow;
  for (const auto& bag : f.bags) {
    if (bag.tokens.size() <= 5) narrow.push_back(bag);
  }
  narrow[0].tokens.resize(std::max<std::size_t>(narrow[0].tokens.size(), 1));
  while (narrow[0].tokens.size() < 5) narrow[0].tokens.push_back(narrow[0].tokens.front());
  std::vector<bd::Bag> wide = narrow;
  bd::Bag filler{"wide", {}, 0};
  for (std::size_t i = 0; i < 17; ++i) filler.tokens.push_back(f.vocab.tokens()[i % f.vocab.size()]);
  wide.push_back(filler);
  std::vector<std::size_t> sn(narrow.size()), sw(wide.size());
  std::iota(sn.begin(), sn.end(), 0);
  std::iota(sw.begin(), sw.end(), 0);
  const auto bn = bd::make_batch(narrow, sn, f.vocab);
  const auto bw = bd::make_batch(wide, sw, f.vocab);
  ASSERT_EQ(bn.width, 5u);
  ASSERT_EQ(bw.width, 17u);
  const auto pn = mn::predict(bn, f.params, f.config);
  const auto pw = mn::predict(bw, f.params, f.config);
  for (std::size_t i = 0; i < narrow.size(); ++i) EXPECT_NEAR(pn[i], pw[i], 1e-9);
}

TEST(Forward, PadRowsReceiveNoGradient) {
  auto f = make_fixture(9, 8, 2, {6, 4});
  std::vector<std::size_t> sel(f.bags.size());
  std::iota(sel.begin(), sel.end(), 0);
  const auto batch = bd::make_batch(f.bags, sel, f.vocab);
  ag::Tape tape;
  auto out = mn::forward(tape, batch, f.params, f.config);
  auto loss = amil::trainer::loss(tape, out.probabilities, batch.labels, {});
  ag::backward(loss, tape);
  const auto g = f.params.at("embedding").grad();
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(g[j], 0.0);
}

TEST(Attention, SingleInstanceWeightIsOne) {
  auto f = make_fixture(10, 8, 2, {6, 4});
  const std::vector<bd::Bag> bags{{"solo", {f.vocab.tokens()[3]}, 0}};
  const std::vector<std::size_t> sel{0};
  ag::Tape tape = ag::Tape::no_grad();
  auto out = mn::forward(tape, bd::make_batch(bags, sel, f.vocab), f.params, f.config);
  EXPECT_DOUBLE_EQ((*out.attention)[0], 1.0);
}

TEST(Attention, UngatedEqualsGatedWithZeroGateAndDoubledScores) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t b = 1 + rng.index(4), l = 1 + rng.index(6), m = 1 + rng.index(5);
    std::vector<std::uint8_t> mask(b * l, 1);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 1; j < l; ++j) mask[i * l + j] = rng.uniform() < 0.7;
    }
    mn::Instances layout{amil::testing::random_tensor(rng, {b * l, m}, -1, 1, false), mask, b, l};
    auto w1 = amil::testing::random_tensor(rng, {m, 1}, -1, 1, false);
    auto w2 = amil::testing::random_tensor(rng, {m, m}, -1, 1, false);
    std::vector<double> doubled(w1.data().begin(), w1.data().end());
    for (double& x : doubled) x *= 2.0;
    ag::Tape tape = ag::Tape::no_grad();
    auto plain = mn::attention_pool(tape, layout.rows, layout, w1, w2, std::nullopt);
    auto gated = mn::gated_attention_pool(tape, layout.rows, layout, ag::Tensor({m, 1}, doubled), w2,
                                          ag::Tensor::zeros({m, m}));
    for (std::size_t i = 0; i < plain.weights.size(); ++i) EXPECT_NEAR(plain.weights[i], gated.weights[i], 1e-12);
    for (std::size_t i = 0; i < plain.pooled.size(); ++i) EXPECT_NEAR(plain.pooled[i], gated.pooled[i], 1e-12);
  }
}

TEST(SelfAdaptivePool, OneHotViewWeightsReproduceEachView) {
  Rng rng(12);
  const std::size_t b = 3, l = 4, m = 5;
  std::vector<std::uint8_t> mask{1, 1, 0, 0, 1, 1, 1, 1, 1, 0, 0, 0};
  mn::Instances layout{amil::testing::random_tensor(rng, {b * l, m}, -1, 1, false), mask, b, l};
  const std::vector<mn::PoolingView> views{mn::PoolingView::max, mn::PoolingView::mean, mn::PoolingView::sum,
                                           mn::PoolingView::lse};
  for (std::size_t k = 0; k < views.size(); ++k) {
    std::vector<double> onehot(views.size(), 0.0);
    onehot[k] = 1.0;
    ag::Tape tape = ag::Tape::no_grad();
    auto sap = mn::self_adaptive_pool(tape, layout.rows, layout, ag::Tensor({views.size(), 1}, onehot), views);
    auto direct = mn::pool_instances(tape, layout.rows, layout, views[k]);
    for (std::size_t i = 0; i < sap.size(); ++i) EXPECT_NEAR(sap[i], direct[i], 1e-12);
  }
}

TEST(ScaledDotAttention, MatchesManualSoftmaxAndRejectsEmptyBag) {
  Rng rng(13);
  auto x = amil::testing::random_tensor(rng, {3, 2}, -1, 1, false);
  ag::Tape tape = ag::Tape::no_grad();
  auto y = mn::scaled_dot_attention(tape, x, {1, 1, 0});
  for (std::size_t i = 0; i < 2; ++i) {
    std::vector<double> s(2);
    for (std::size_t j = 0; j < 2; ++j) s[j] = (x[i * 2] * x[j * 2] + x[i * 2 + 1] * x[j * 2 + 1]) / std::sqrt(2.0);
    const auto a = Reference::softmax(s);
    for (std::size_t t = 0; t < 2; ++t) EXPECT_NEAR(y[i * 2 + t], a[0] * x[t] + a[1] * x[2 + t], 1e-12);
  }
  EXPECT_EQ(y[4], 0.0);
  EXPECT_EQ(y[5], 0.0);
  EXPECT_THROW(mn::scaled_dot_attention(tape, x, {0, 0, 0}), amil::DomainError);
}

TEST(Baselines, ForwardShapesAndGradients) {
  for (auto kind : {mn::ModelKind::mi_net, mn::ModelKind::big_mi_net, mn::ModelKind::att_net,
                    mn::ModelKind::gated_att_net}) {
    auto f = make_fixture(14, 8, 2, {6, 4});
    f.config.kind = kind;
    f.params = mn::init_params(f.config, 14);
    std::vector<std::size_t> sel{0, 1, 2};
    const auto batch = bd::make_batch(f.bags, sel, f.vocab);
    auto builder = [&](ag::Tape& t) {
      auto out = mn::forward(t, batch, f.params, f.config);
      return amil::trainer::loss(t, out.probabilities, batch.labels, {});
    };
    auto report = ag::gradcheck(builder, f.params);
    EXPECT_TRUE(report.passed()) << mn::to_string(kind);
    EXPECT_FALSE(f.params.contains("attn.output"));
  }
}

TEST(Forward, FullModelGradcheckAcrossPoolingModes) {
  for (auto mode : {mn::InstancePooling::self_adaptive, mn::InstancePooling::max, mn::InstancePooling::mean,
                    mn::InstancePooling::sum, mn::InstancePooling::lse, mn::InstancePooling::attention}) {
    auto f = make_fixture(15, 8, 2, {6, 4});
    f.config.instance_pooling = mode;
    f.params = mn::init_params(f.config, 15);
    std::vector<std::size_t> sel{0, 1, 2, 3};
    const auto batch = bd::make_batch(f.bags, sel, f.vocab);
    auto builder = [&](ag::Tape& t) {
      auto out = mn::forward(t, batch, f.params, f.config);
      return amil::trainer::loss(t, out.probabilities, batch.labels, {});
    };
    auto report = ag::gradcheck(builder, f.params);
    EXPECT_TRUE(report.passed()) << mn::to_string(mode);
    std::set<std::string> names;
    for (const auto& e : report.entries) names.insert(e.name);
    EXPECT_EQ(names.size(), f.params.size());
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripIsExact) {
  auto f = make_fixture(16, 8, 2, {6, 4});
  auto bytes = mn::encode_checkpoint(f.params, f.config, f.vocab);
  auto ck = mn::decode_checkpoint(bytes);
  EXPECT_EQ(ck.config, f.config);
  EXPECT_EQ(ck.vocabulary, f.vocab);
  ASSERT_EQ(ck.params.size(), f.params.size());
  for (const auto& p : f.params) {
    const auto a = p.value.data();
    const auto b = ck.params.at(p.name).data();
    ASSERT_EQ(a.size(), b.size());
    EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)), 0) << p.name;
  }
  EXPECT_EQ(mn::encode_checkpoint(ck.params, ck.config, ck.vocabulary), bytes);
}

TEST(Checkpoint, TruncationAndTamperingRejected) {
  auto f = make_fixture(17, 8, 2, {6, 4});
  const auto bytes = mn::encode_checkpoint(f.params, f.config, f.vocab);
  for (std::size_t cut : {std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(mn::decode_checkpoint(bytes.substr(0, cut)), amil::DataError) << cut;
  }
  EXPECT_THROW(mn::decode_checkpoint(bytes + "x"), amil::DataError);
  std::string wrong_tag = bytes;
  wrong_tag[0] = 'X';
  EXPECT_THROW(mn::decode_checkpoint(wrong_tag), amil::DataError);

  // Editing vocab_size in the header must produce a shape mismatch naming
  // the embedding tensor.
  const std::string key = "\"vocab_size\":" + std::to_string(f.config.vocab_size);
  std::string edited = bytes;
  const auto pos = edited.find(key);
  ASSERT_NE(pos, std::string::npos);
  edited.replace(pos, key.size(), "\"vocab_size\":" + std::to_string(f.config.vocab_size + 1));
  // Keep the declared header length consistent with the edit.
  const std::size_t magic = std::string(mn::kCheckpointFormat).size() + 1;
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(edited[magic + i])) << (8 * i);
  len += std::to_string(f.config.vocab_size + 1).size() - std::to_string(f.config.vocab_size).size();
  for (int i = 0; i < 8; ++i) edited[magic + i] = static_cast<char>((len >> (8 * i)) & 0xff);
  try {
    mn::decode_checkpoint(edited);
    FAIL();
  } catch (const amil::DataError& e) {
    const std::string w = e.what();
    EXPECT_NE(w.find("shape mismatch"), std::string::npos) << w;
    EXPECT_NE(w.find("embedding"), std::string::npos) << w;
  }
}

TEST(Checkpoint, IncompatibleParamsRejectedOnSave) {
  auto f = make_fixture(18, 8, 2, {6, 4});
  auto other = f.config;
  other.num_heads = 4;
  EXPECT_THROW(mn::encode_checkpoint(f.params, other, f.vocab), amil::ConfigError);
}

#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "mscl/model.hpp"

using namespace mscl;

namespace {

EncoderSpec toy_spec() {
  EncoderSpec s;
  s.input_side = 8;
  s.channels = {2, 3, 4};
  s.local_layer = 2;
  s.repr_dim = 8;
  return s;
}

template <class T>
Var<T> random_input(const EncoderSpec& s, std::size_t batch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t side = std::size_t(s.input_side);
  std::vector<T> v(batch * side * side * side);
  for (auto& x : v) x = T(u(rng));
  return Var<T>::leaf({batch, 1, side, side, side}, std::move(v), false);
}

}  // namespace

TEST(Model, SameSeedBitIdentical) {
  ModelSpec spec;
  spec.encoder = toy_spec();
  spec.with_local_head = spec.with_global_head = spec.with_decoder = true;
  auto a = build_model<float>(spec, 3), b = build_model<float>(spec, 3), c = build_model<float>(spec, 4);
  ASSERT_EQ(a.params.names, b.params.names);
  bool differs = false;
  for (std::size_t i = 0; i < a.params.tensors.size(); ++i) {
    auto va = a.params.tensors[i].value(), vb = b.params.tensors[i].value(), vc = c.params.tensors[i].value();
    EXPECT_TRUE(std::equal(va.begin(), va.end(), vb.begin()));
    differs |= !std::equal(va.begin(), va.end(), vc.begin());
  }
  EXPECT_TRUE(differs);
}

TEST(Model, ModalitiesDoNotShareParameters) {
  ModelSpec spec;
  spec.encoder = toy_spec();
  auto m = build_model<double>(spec, 1);
  auto w1 = m.params.at("m1.encoder.conv0.weight").value();
  auto w2 = m.params.at("m2.encoder.conv0.weight").value();
  EXPECT_FALSE(std::equal(w1.begin(), w1.end(), w2.begin()));
}

TEST(Model, LocalLayerBoundsEnforced) {
  auto s = toy_spec();
  s.local_layer = 1;
  EXPECT_THROW(s.validate(), ConfigError);
  s.local_layer = 3;
  EXPECT_THROW(s.validate(), ConfigError);
  s = toy_spec();
  s.input_side = 12;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Model, FullSizeGeometryLocals) {
  ModelSpec spec;
  spec.encoder = EncoderSpec::dcgan64();
  auto m = build_model<float>(spec, 0);
  auto out = m.nets[0].encoder.forward(random_input<float>(spec.encoder, 1, 1));
  EXPECT_EQ(out.local_map.shape(), (ag::Shape{1, 128, 8, 8, 8}));
  EXPECT_EQ(out.z.shape(), (ag::Shape{1, 64}));
  EXPECT_EQ(out.locals().shape(), (ag::Shape{1, 512, 128}));
}

TEST(Model, Side32LocalSide) {
  ModelSpec spec;
  spec.encoder.input_side = 32;
  spec.encoder.channels = {2, 2, 2, 2};
  spec.encoder.local_layer = 3;
  auto m = build_model<float>(spec, 0);
  auto out = m.nets[1].encoder.forward(random_input<float>(spec.encoder, 2, 1));
  EXPECT_EQ(out.local_map.shape(), (ag::Shape{2, 2, 4, 4, 4}));
  auto wrong = random_input<float>(toy_spec(), 1, 1);
  EXPECT_THROW(m.nets[1].encoder.forward(wrong), ConfigError);
}

TEST(Model, ZeroInputZeroBiasGivesZero) {
  ModelSpec spec;
  spec.encoder = toy_spec();
  auto m = build_model<double>(spec, 5);
  auto x = Var<double>::constant({2, 1, 8, 8, 8}, std::vector<double>(2 * 512, 0.0));
  auto out = m.nets[0].encoder.forward(x);
  for (double v : out.z.value()) EXPECT_EQ(v, 0.0);
}

TEST(Model, ReceptiveFieldBetweenVoxelAndInput) {
  for (auto spec : {EncoderSpec{}, EncoderSpec::dcgan64()}) {
    const int rf = receptive_field(spec, spec.local_layer);
    EXPECT_GT(rf, 1);
    EXPECT_LT(rf, spec.input_side);
  }
  EXPECT_EQ(receptive_field(EncoderSpec::dcgan64(), 3), 22);
}

TEST(Model, LocalHeadMatchesHandBuiltReference) {
  ModelSpec spec;
  spec.encoder = toy_spec();
  spec.with_local_head = true;
  spec.local.hidden = 5;
  auto m = build_model<double>(spec, 2);
  const auto& head = *m.nets[0].local_head;
  auto locals = testutil::random_leaf({2, 3, 3}, 9);  // C = 3 channels at layer 2
  auto out = head(locals);
  ASSERT_EQ(out.shape(), (ag::Shape{2, 3, 8}));
  auto W1 = head.a1.weight.value(), W2 = head.a2.weight.value();
  for (std::size_t r = 0; r < 6; ++r) {
    const double* c = locals.value().data() + r * 3;
    std::vector<double> h(5);
    for (int j = 0; j < 5; ++j) {
      double acc = 0;
      for (int k = 0; k < 3; ++k) acc += W1[std::size_t(j * 3 + k)] * c[k];
      h[std::size_t(j)] = std::max(acc, 0.0);
    }
    for (int o = 0; o < 8; ++o) {
      double acc = o < 3 ? c[o] : 0.0;  // identity path B
      for (int j = 0; j < 5; ++j) acc += W2[std::size_t(o * 5 + j)] * h[std::size_t(j)];
      EXPECT_NEAR(out.value()[r * 8 + std::size_t(o)], acc, 1e-12);
    }
  }
  EXPECT_THROW(head(testutil::random_leaf({2, 3, 4}, 1)), ConfigError);
}

TEST(Model, GlobalHeadIdentityAndLayerOracle) {
  ModelSpec spec;
  spec.encoder = toy_spec();
  spec.with_global_head = true;
  spec.global.hidden_layers = 0;
  auto m = build_model<double>(spec, 2);
  auto& head = *m.nets[0].global_head;
  auto w = head.layers[0].weight.value_mut();
  std::fill(w.begin(), w.end(), 0.0);
  for (int i = 0; i < 8; ++i) w[std::size_t(i * 9)] = 1.0;
  auto z = testutil::random_leaf({3, 8}, 4);
  auto y = project_global(head, z);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_DOUBLE_EQ(y.value()[i], z.value()[i]);

  spec.global.hidden_layers = 2;
  spec.global.width = 6;
  auto m2 = build_model<double>(spec, 3);
  const auto& h2 = *m2.nets[1].global_head;
  ASSERT_EQ(h2.layers.size(), 3u);
  auto ref = ag::linear(ag::relu(ag::linear(ag::relu(ag::linear(z, h2.layers[0].weight, h2.layers[0].bias)),
                                            h2.layers[1].weight, h2.layers[1].bias)),
                        h2.layers[2].weight, h2.layers[2].bias);
  auto got = h2(z);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_DOUBLE_EQ(got.value()[i], ref.value()[i]);

  spec.global.hidden_layers = -1;
  auto m3 = build_model<double>(spec, 3);
  ASSERT_TRUE(m3.nets[0].global_head.has_value());
  EXPECT_TRUE(m3.nets[0].global_head->layers.empty());
}

TEST(Model, DecoderShapeRangeAndGradient) {
  ModelSpec spec;
  spec.encoder.input_side = 32;
  spec.encoder.channels = {2, 2, 3, 3};
  spec.encoder.local_layer = 2;
  spec.encoder.repr_dim = 6;
  spec.with_decoder = true;
  auto m = build_model<double>(spec, 7);
  auto z = testutil::random_leaf({2, 6}, 8, -3, 3);
  auto x = decode(*m.nets[0].decoder, z);
  EXPECT_EQ(x.shape(), (ag::Shape{2, 1, 32, 32, 32}));
  for (double v : x.value()) ASSERT_TRUE(v > 0.0 && v < 1.0);

  auto target = random_input<double>(spec.encoder, 2, 3);
  auto loss = ag::sum_squares(ag::sub(decode(*m.nets[0].decoder, z), target));
  ag::backward(loss);
  double norm = 0;
  for (double g : z.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(Model, EncoderJvpMatchesFiniteDifferences) {
  ModelSpec spec;
  spec.encoder = toy_spec();
  auto m = build_model<double>(spec, 11);
  auto x = random_input<double>(spec.encoder, 1, 12);
  auto xl = Var<double>::leaf(x.shape(), std::vector<double>(x.value().begin(), x.value().end()), true);
  std::mt19937_64 rng(13);
  std::normal_distribution<double> n01;
  std::vector<double> v(xl.size()), u(8);
  for (auto& e : v) e = n01(rng);
  for (auto& e : u) e = n01(rng);
  // u^T J v via reverse mode, against central differences of u^T z along v.
  auto z = m.nets[0].encoder.forward(xl).z;
  ag::backward(z, std::span<const double>(u));
  double analytic = 0;
  for (std::size_t i = 0; i < v.size(); ++i) analytic += xl.grad()[i] * v[i];
  auto f = [&](double h) {
    std::vector<double> xs(x.value().begin(), x.value().end());
    for (std::size_t i = 0; i < xs.size(); ++i) xs[i] += h * v[i];
    auto zz = m.nets[0].encoder.forward(Var<double>::constant(x.shape(), xs)).z;
    double acc = 0;
    for (std::size_t i = 0; i < 8; ++i) acc += u[i] * zz.value()[i];
    return acc;
  };
  const double h = 1e-5;
  const double numeric = (f(h) - f(-h)) / (2 * h);
  EXPECT_LT(std::abs(numeric - analytic) / std::max(1e-8, std::abs(numeric)), 1e-4);
}

TEST(Model, MakeBatchStacksVolumes) {
  Volume a = Volume::cube(4, 0.25f), b = Volume::cube(4, 0.75f);
  auto batch = make_batch<float>({&a, &b});
  EXPECT_EQ(batch.shape(), (ag::Shape{2, 1, 4, 4, 4}));
  EXPECT_EQ(batch.value()[64], 0.75f);
  Volume c = Volume::cube(3);
  EXPECT_THROW(make_batch<float>({&a, &c}), DataError);
}

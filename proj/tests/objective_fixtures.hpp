#pragma once

// Random per-modality outputs mirrored into library tensors and oracle arrays.

#include <random>
#include <string>
#include <vector>

#include "mscl/objectives.hpp"
#include "oracles.hpp"

namespace fixtures {

struct RandomOutputs {
  std::array<mscl::ModalityOutputs<double>, 2> lib;
  std::array<oracle::Outputs, 2> ref;
  oracle::Dims dims;
  std::vector<int> labels;
};

inline std::vector<double> draw(std::size_t n, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

/// scale controls score magnitude; large values push scores into the clipped regime.
inline RandomOutputs random_outputs(std::size_t B, std::size_t S, std::size_t d, std::uint64_t seed, double scale = 1.0) {
  using mscl::ag::Var;
  RandomOutputs r;
  r.dims = {B, S, d, 27, 3};
  std::mt19937_64 rng(seed);
  for (int m = 0; m < 2; ++m) {
    auto& o = r.ref[std::size_t(m)];
    o.locals = draw(B * S * d, rng, scale);
    o.glob = draw(B * d, rng, scale);
    o.z = draw(B * d, rng, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    o.input.resize(B * 27);
    o.recon.resize(B * 27);
    for (auto& x : o.input) x = u(rng);
    for (auto& x : o.recon) x = u(rng);
    o.logits = draw(B * 3, rng, 2.0);
    auto& l = r.lib[std::size_t(m)];
    l.local_proj = Var<double>::leaf({B, S, d}, o.locals);
    l.global_proj = Var<double>::leaf({B, d}, o.glob);
    l.z = Var<double>::leaf({B, d}, o.z);
    l.input = Var<double>::constant({B, 1, 3, 3, 3}, o.input);
    l.recon = Var<double>::leaf({B, 1, 3, 3, 3}, o.recon);
    l.logits = Var<double>::leaf({B, 3}, o.logits);
  }
  for (std::size_t b = 0; b < B; ++b) r.labels.push_back(int(b % 3));
  return r;
}

inline std::vector<std::string> term_names(const mscl::ObjectiveSpec& spec) {
  std::vector<std::string> out;
  for (auto t : spec.terms) out.push_back(mscl::term_name(t));
  return out;
}

/// Anchor locations the library will draw for CC from a copy of `rng`.
inline std::vector<std::size_t> cc_anchors(mscl::Rng rng, std::size_t B, std::size_t S) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::size_t> a(B);
  for (auto& x : a) x = std::size_t(std::floor(u(rng) * double(S)));
  return a;
}

inline oracle::Critic oracle_critic(const mscl::CriticConfig& c) {
  oracle::Critic o;
  o.d_scale = c.d;
  o.c = c.clip_c;
  o.lambda = c.penalty_lambda;
  o.positives_only = c.penalty_positives_only;
  return o;
}

}  // namespace fixtures

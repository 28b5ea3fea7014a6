#pragma once

// Critic, InfoNCE-based objectives (CR, XX, RR, CC), the CCA / reconstruction /
// cross-entropy baselines, and the composition rule that turns a term list into
// one minimized scalar.

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mscl/autograd.hpp"
#include "mscl/error.hpp"
#include "mscl/model.hpp"
#include "mscl/rng.hpp"

namespace mscl {

struct CriticConfig {
  int d = 64;
  double clip_c = 20.0;
  double penalty_lambda = 4e-2;
  bool penalty_positives_only = false;
  double cca_ridge = 1e-3;

  void validate() const {
    if (d <= 0) throw ConfigError("CriticConfig: d must be positive");
    if (!(clip_c > 0)) throw ConfigError("CriticConfig: clip_c must be positive");
    if (penalty_lambda < 0) throw ConfigError("CriticConfig: penalty_lambda must be >= 0");
    if (!(cca_ridge > 0)) throw ConfigError("CriticConfig: cca_ridge must be positive");
  }
};

inline void to_json(nlohmann::json& j, const CriticConfig& c) {
  j = {{"d", c.d},
       {"clip_c", c.clip_c},
       {"penalty_lambda", c.penalty_lambda},
       {"penalty_positives_only", c.penalty_positives_only},
       {"cca_ridge", c.cca_ridge}};
}
inline void from_json(const nlohmann::json& j, CriticConfig& c) {
  CriticConfig d;
  c.d = j.value("d", d.d);
  c.clip_c = j.value("clip_c", d.clip_c);
  c.penalty_lambda = j.value("penalty_lambda", d.penalty_lambda);
  c.penalty_positives_only = j.value("penalty_positives_only", d.penalty_positives_only);
  c.cca_ridge = j.value("cca_ridge", d.cca_ridge);
}

/// x.y / sqrt(d).
inline double critic_score(std::span<const double> x, std::span<const double> y, const CriticConfig& cfg) {
  if (x.size() != y.size())
    throw ConfigError("critic_score: dimension mismatch " + std::to_string(x.size()) + " vs " +
                      std::to_string(y.size()));
  double acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
  return acc / std::sqrt(double(cfg.d));
}

/// c * tanh(s / c).
inline double clip_score(double s, const CriticConfig& cfg) { return cfg.clip_c * std::tanh(s / cfg.clip_c); }

// ---------------------------------------------------------------------------
// Terms and specs

enum class Term { CR, RR, XX, CC, CCA, AE, CE };

inline const std::array<Term, 7>& all_terms() {
  static const std::array<Term, 7> t{Term::CR, Term::RR, Term::XX, Term::CC, Term::CCA, Term::AE, Term::CE};
  return t;
}

inline std::string term_name(Term t) {
  switch (t) {
    case Term::CR: return "CR";
    case Term::RR: return "RR";
    case Term::XX: return "XX";
    case Term::CC: return "CC";
    case Term::CCA: return "CCA";
    case Term::AE: return "AE";
    case Term::CE: return "CE";
  }
  return "?";
}

inline bool is_mi_term(Term t) { return t == Term::CR || t == Term::RR || t == Term::XX || t == Term::CC; }

struct ObjectiveSpec {
  std::set<Term> terms;  // iteration order = canonical naming order
  bool symmetrize = true;
  CriticConfig critic;

  bool has(Term t) const { return terms.count(t) > 0; }
  bool needs_local_head() const { return has(Term::CR) || has(Term::XX) || has(Term::CC); }
  bool needs_global_head() const { return has(Term::CR) || has(Term::XX) || has(Term::RR); }
  bool needs_decoder() const { return has(Term::AE); }
  bool needs_labels() const { return has(Term::CE); }
  bool uses_scores() const { return needs_local_head() || has(Term::RR); }
  /// Couples the two modalities; CR, AE and CE alone train each encoder on its own.
  bool multimodal() const { return has(Term::XX) || has(Term::RR) || has(Term::CC) || has(Term::CCA); }
  bool cc_alone() const { return terms.size() == 1 && has(Term::CC); }

  /// Display name: baselines by their usual names, taxonomy nodes as CR/RR/XX/CC joined by '-'.
  std::string name() const;

  std::vector<std::string> warnings() const {
    std::vector<std::string> w;
    if (cc_alone())
      w.push_back("objective CC alone: no term reaches the encoder's last layer, so z behaves as a random projection");
    return w;
  }

  void validate() const {
    if (terms.empty()) throw ConfigError("ObjectiveSpec: empty term list");
    critic.validate();
  }

  /// Head/decoder attachments implied by the terms on top of a given encoder.
  ModelSpec model_spec(const EncoderSpec& enc, const GlobalHeadSpec& global, int n_classes) const {
    ModelSpec m;
    m.encoder = enc;
    m.global = global;
    m.with_local_head = needs_local_head();
    m.with_global_head = needs_global_head();
    m.with_decoder = needs_decoder();
    m.n_classes = needs_labels() ? n_classes : 0;
    return m;
  }
};

struct TaxonomyEntry {
  std::string name;
  std::set<Term> terms;
  bool baseline = false;
};

/// The 15 non-empty subsets of {CR, RR, XX, CC} followed by the 5 baselines.
inline std::vector<TaxonomyEntry> taxonomy() {
  static const std::array<Term, 4> base{Term::CR, Term::RR, Term::XX, Term::CC};
  std::vector<TaxonomyEntry> out;
  // Ordered by subset size, then lexicographically in canonical order.
  for (int size = 1; size <= 4; ++size)
    for (int mask = 1; mask < 16; ++mask) {
      if (std::popcount(unsigned(mask)) != size) continue;
      TaxonomyEntry e;
      for (int b = 0; b < 4; ++b)
        if (mask & (1 << b)) e.terms.insert(base[std::size_t(b)]);
      out.push_back(e);
    }
  std::stable_sort(out.begin(), out.end(), [](const TaxonomyEntry& a, const TaxonomyEntry& b) {
    if (a.terms.size() != b.terms.size()) return a.terms.size() < b.terms.size();
    return std::lexicographical_compare(a.terms.begin(), a.terms.end(), b.terms.begin(), b.terms.end());
  });
  out.push_back({"", {Term::CE}, true});
  out.push_back({"", {Term::AE}, true});
  out.push_back({"", {Term::CCA, Term::AE}, true});
  out.push_back({"", {Term::CR, Term::CCA}, true});
  out.push_back({"", {Term::RR, Term::AE}, true});
  for (auto& e : out) {
    ObjectiveSpec s;
    s.terms = e.terms;
    e.name = s.name();
  }
  return out;
}

inline std::string ObjectiveSpec::name() const {
  if (terms == std::set<Term>{Term::CE}) return "Supervised";
  if (terms == std::set<Term>{Term::AE}) return "AE";
  if (terms == std::set<Term>{Term::CCA, Term::AE}) return "DCCAE";
  std::string s;
  for (Term t : terms) s += (s.empty() ? "" : "-") + term_name(t);
  return s;
}

inline std::string valid_objective_names() {
  std::string s;
  for (const auto& e : taxonomy()) s += (s.empty() ? "" : ", ") + e.name;
  return s;
}

/// Parses "RR-XX", "xx,rr", "DCCAE", "Supervised", ... into a term set.
inline std::set<Term> parse_terms(const std::string& text) {
  std::set<Term> terms;
  std::string token;
  auto flush = [&] {
    if (token.empty()) return;
    std::string up;
    for (char c : token) up += char(std::toupper(static_cast<unsigned char>(c)));
    token.clear();
    if (up == "SUPERVISED" || up == "SUP") {
      terms.insert(Term::CE);
      return;
    }
    if (up == "DCCAE") {
      terms.insert(Term::CCA);
      terms.insert(Term::AE);
      return;
    }
    for (Term t : all_terms())
      if (up == term_name(t)) {
        terms.insert(t);
        return;
      }
    throw ConfigError("unknown objective term '" + up + "'; terms are CR, RR, XX, CC, CCA, AE, CE; valid models: " +
                      valid_objective_names());
  };
  for (char c : text) {
    if (c == '-' || c == ',' || c == '+' || c == ' ')
      flush();
    else
      token += c;
  }
  flush();
  if (terms.empty()) throw ConfigError("empty objective; valid models: " + valid_objective_names());
  return terms;
}

inline ObjectiveSpec parse_objective(const std::string& text, const CriticConfig& critic = {}) {
  ObjectiveSpec s;
  s.terms = parse_terms(text);
  s.critic = critic;
  s.validate();
  return s;
}

inline ObjectiveSpec parse_objective(const std::vector<std::string>& names, const CriticConfig& critic = {}) {
  std::string joined;
  for (const auto& n : names) joined += n + ",";
  return parse_objective(joined, critic);
}

// ---------------------------------------------------------------------------
// Differentiable terms

/// Collects squared pre-clip scores for the lambda penalty.
template <class T>
struct PenaltyAccumulator {
  bool positives_only = false;
  std::vector<Var<T>> sums;
  std::size_t count = 0;

  void add(const Var<T>& scores) {  // [G,N,N]
    const std::size_t g = scores.dim(0), n = scores.dim(1);
    if (positives_only) {
      std::vector<T> mask(scores.size(), T(0));
      for (std::size_t k = 0; k < g; ++k)
        for (std::size_t i = 0; i < n; ++i) mask[(k * n + i) * n + i] = T(1);
      sums.push_back(ag::sum_squares(ag::mul(scores, Var<T>::constant(scores.shape(), std::move(mask)))));
      count += g * n;
    } else {
      sums.push_back(ag::sum_squares(scores));
      count += scores.size();
    }
  }

  /// lambda * mean of the collected squares (0 if nothing was collected).
  Var<T> value(T lambda) const {
    if (sums.empty()) return Var<T>::scalar(T(0));
    Var<T> acc = sums.front();
    for (std::size_t i = 1; i < sums.size(); ++i) acc = ag::add(acc, sums[i]);
    return ag::scale(acc, lambda / static_cast<T>(count));
  }
};

namespace obj_detail {

inline void require_batch(std::size_t b, const char* what) {
  if (b < 2) throw ConfigError(std::string(what) + ": batch of " + std::to_string(b) + " has no negatives (need B >= 2)");
}

template <class T>
T critic_factor(const CriticConfig& cfg, std::size_t width) {
  if (int(width) != cfg.d)
    throw ConfigError("critic: representation width " + std::to_string(width) + " does not match critic d=" +
                      std::to_string(cfg.d));
  return T(1) / std::sqrt(static_cast<T>(cfg.d));
}

/// InfoNCE of anchors [B,S,d] against targets [B,d]: one B x B score matrix per location.
template <class T>
Var<T> local_global_infonce(const Var<T>& anchors, const Var<T>& targets, const CriticConfig& cfg,
                            PenaltyAccumulator<T>* penalty) {
  if (anchors.rank() != 3 || targets.rank() != 2 || anchors.dim(0) != targets.dim(0) ||
      anchors.dim(2) != targets.dim(1))
    throw ConfigError("objective: anchors " + ag::to_string(anchors.shape()) + " vs targets " +
                      ag::to_string(targets.shape()));
  require_batch(anchors.dim(0), "objective");
  Var<T> scores = ag::critic_scores(anchors, targets, critic_factor<T>(cfg, targets.dim(1)));
  if (penalty) penalty->add(scores);
  return ag::infonce(ag::soft_clip(scores, static_cast<T>(cfg.clip_c)));
}

}  // namespace obj_detail

/// Intra-modal local <-> global InfoNCE for one modality (locals [B,S,d], z [B,d], both projected).
template <class T>
Var<T> loss_cr(const Var<T>& locals, const Var<T>& z, const CriticConfig& cfg, PenaltyAccumulator<T>* penalty = nullptr) {
  return obj_detail::local_global_infonce(locals, z, cfg, penalty);
}

/// Cross-modal: locals of modality m against globals of modality k (one direction).
template <class T>
Var<T> loss_xx(const Var<T>& locals_m, const Var<T>& z_k, const CriticConfig& cfg,
               PenaltyAccumulator<T>* penalty = nullptr) {
  return obj_detail::local_global_infonce(locals_m, z_k, cfg, penalty);
}

/// Cross-modal global <-> global: rows are anchors z_m, columns z_k.
template <class T>
Var<T> loss_rr(const Var<T>& z_m, const Var<T>& z_k, const CriticConfig& cfg, PenaltyAccumulator<T>* penalty = nullptr) {
  if (z_m.rank() != 2) throw ConfigError("loss_rr: expected [B,d], got " + ag::to_string(z_m.shape()));
  return obj_detail::local_global_infonce(ag::reshape(z_m, {z_m.dim(0), 1, z_m.dim(1)}), z_k, cfg, penalty);
}

/// One uniform draw per sample; anchor location = floor(u * S).
inline std::vector<double> draw_cc_uniforms(std::size_t batch, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> out(batch);
  for (auto& x : out) x = u(rng);
  return out;
}

inline std::vector<std::size_t> cc_anchor_index(const std::vector<double>& uniforms, std::size_t locations) {
  std::vector<std::size_t> idx(uniforms.size());
  for (std::size_t i = 0; i < idx.size(); ++i)
    idx[i] = std::min(locations - 1, std::size_t(uniforms[i] * double(locations)));
  return idx;
}

/// Cross-modal local <-> local with a given anchor location per sample from modality k.
template <class T>
Var<T> loss_cc_at(const Var<T>& locals_m, const Var<T>& locals_k, const std::vector<std::size_t>& anchor,
                  const CriticConfig& cfg, PenaltyAccumulator<T>* penalty = nullptr) {
  if (locals_k.rank() != 3) throw ConfigError("loss_cc: expected [B,S,d] locals");
  obj_detail::require_batch(locals_k.dim(0), "loss_cc");
  return obj_detail::local_global_infonce(locals_m, ag::gather_locations(locals_k, anchor), cfg, penalty);
}

template <class T>
Var<T> loss_cc(const Var<T>& locals_m, const Var<T>& locals_k, const CriticConfig& cfg, Rng& rng,
               PenaltyAccumulator<T>* penalty = nullptr) {
  if (locals_k.rank() != 3) throw ConfigError("loss_cc: expected [B,S,d] locals");
  const auto u = draw_cc_uniforms(locals_k.dim(0), rng);
  return loss_cc_at(locals_m, locals_k, cc_anchor_index(u, locals_k.dim(1)), cfg, penalty);
}

/// Soft CCA surrogate on raw representations: minus the mean squared canonical correlation.
template <class T>
Var<T> loss_cca(const Var<T>& z_m, const Var<T>& z_k, const CriticConfig& cfg) {
  return ag::soft_cca(z_m, z_k, static_cast<T>(cfg.cca_ridge));
}

/// Mean over the batch of the summed squared voxel error.
template <class T>
Var<T> loss_ae(const Var<T>& x, const Var<T>& x_hat) {
  if (x.shape() != x_hat.shape())
    throw ConfigError("loss_ae: shape mismatch " + ag::to_string(x.shape()) + " vs " + ag::to_string(x_hat.shape()));
  return ag::scale(ag::sum_squares(ag::sub(x, x_hat)), T(1) / static_cast<T>(x.dim(0)));
}

template <class T>
Var<T> loss_supervised(const Var<T>& logits, const std::vector<int>& labels) {
  return ag::cross_entropy(logits, labels);
}

// ---------------------------------------------------------------------------
// Composition

/// What compose() needs from one modality; unused fields may stay undefined.
template <class T>
struct ModalityOutputs {
  Var<T> input;        // [B,1,s,s,s]
  Var<T> z;            // encoder output
  Var<T> local_proj;   // [B,S,d] after the local head
  Var<T> global_proj;  // [B,d] after the global head
  Var<T> recon;        // decoder output
  Var<T> logits;       // classifier output
};

template <class T>
struct LossBreakdown {
  std::map<std::string, double> terms;  // unweighted per-term values, MI terms as estimates (not negated)
  double penalty = 0;
  double total = 0;
  Var<T> total_var;
};

/// Column order used in metrics files for a given spec.
inline std::vector<std::string> breakdown_keys(const ObjectiveSpec& spec) {
  std::vector<std::string> keys;
  const bool sym = spec.symmetrize;
  for (Term t : spec.terms) {
    const std::string n = term_name(t);
    switch (t) {
      case Term::CR:
      case Term::AE:
      case Term::CE:
        keys.push_back(n + "_1");
        keys.push_back(n + "_2");
        break;
      default:
        keys.push_back(n + "_12");
        if (sym) keys.push_back(n + "_21");
    }
  }
  return keys;
}

namespace obj_detail {

template <class T>
const Var<T>& need(const Var<T>& v, Term t, const char* what, int m) {
  if (!v.defined())
    throw ConfigError("term " + term_name(t) + " needs " + what + " for modality " + std::to_string(m + 1));
  return v;
}

}  // namespace obj_detail

/// Total = -sum(MI estimates) + sum(CCA, reconstruction, cross-entropy) + lambda * mean squared pre-clip score.
/// CC draws one uniform per sample from `rng` and shares the anchor positions between both directions.
template <class T>
LossBreakdown<T> compose(const ObjectiveSpec& spec, const std::array<ModalityOutputs<T>, 2>& out,
                         const std::vector<int>* labels, Rng& rng) {
  spec.validate();
  using obj_detail::need;
  const CriticConfig& cfg = spec.critic;
  PenaltyAccumulator<T> penalty;
  penalty.positives_only = cfg.penalty_positives_only;
  LossBreakdown<T> br;
  std::vector<Var<T>> minimized;  // already signed
  auto record = [&](const std::string& key, const Var<T>& v, bool mi) {
    br.terms[key] = double(v.item());
    minimized.push_back(mi ? ag::scale(v, T(-1)) : v);
  };
  std::vector<std::pair<int, int>> dirs{{0, 1}};
  if (spec.symmetrize) dirs.push_back({1, 0});
  auto dkey = [](const std::string& n, int m, int k) { return n + "_" + std::to_string(m + 1) + std::to_string(k + 1); };

  std::vector<double> cc_u;
  if (spec.has(Term::CC)) cc_u = draw_cc_uniforms(need(out[0].local_proj, Term::CC, "projected locals", 0).dim(0), rng);

  for (Term t : spec.terms) {
    switch (t) {
      case Term::CR:
        for (int m = 0; m < 2; ++m)
          record("CR_" + std::to_string(m + 1),
                 loss_cr(need(out[m].local_proj, t, "projected locals", m), need(out[m].global_proj, t, "projected globals", m),
                         cfg, &penalty),
                 true);
        break;
      case Term::XX:
        for (auto [m, k] : dirs)
          record(dkey("XX", m, k),
                 loss_xx(need(out[m].local_proj, t, "projected locals", m), need(out[k].global_proj, t, "projected globals", k),
                         cfg, &penalty),
                 true);
        break;
      case Term::RR:
        for (auto [m, k] : dirs)
          record(dkey("RR", m, k),
                 loss_rr(need(out[m].global_proj, t, "projected globals", m), need(out[k].global_proj, t, "projected globals", k),
                         cfg, &penalty),
                 true);
        break;
      case Term::CC:
        for (auto [m, k] : dirs) {
          const auto& lk = need(out[k].local_proj, t, "projected locals", k);
          record(dkey("CC", m, k),
                 loss_cc_at(need(out[m].local_proj, t, "projected locals", m), lk, cc_anchor_index(cc_u, lk.dim(1)), cfg,
                            &penalty),
                 true);
        }
        break;
      case Term::CCA:
        for (auto [m, k] : dirs)
          record(dkey("CCA", m, k), loss_cca(need(out[m].z, t, "z", m), need(out[k].z, t, "z", k), cfg), false);
        break;
      case Term::AE:
        for (int m = 0; m < 2; ++m)
          record("AE_" + std::to_string(m + 1),
                 loss_ae(need(out[m].input, t, "the input batch", m), need(out[m].recon, t, "decoder output", m)), false);
        break;
      case Term::CE:
        if (!labels) throw ConfigError("term CE needs labels");
        for (int m = 0; m < 2; ++m)
          record("CE_" + std::to_string(m + 1), loss_supervised(need(out[m].logits, t, "classifier logits", m), *labels),
                 false);
        break;
    }
  }
  Var<T> pen = penalty.value(static_cast<T>(cfg.penalty_lambda));
  br.penalty = double(pen.item());
  Var<T> total = pen;
  for (const auto& v : minimized) total = ag::add(total, v);
  br.total_var = total;
  br.total = double(total.item());
  if (!std::isfinite(br.total)) throw NumericError("compose: non-finite total loss");
  return br;
}

/// Runs the heads, decoder and classifier that `spec` needs on top of both encoders.
template <class T>
std::array<ModalityOutputs<T>, 2> model_outputs(const MultimodalModel<T>& model, const ObjectiveSpec& spec,
                                                const std::array<Var<T>, 2>& inputs) {
  std::array<ModalityOutputs<T>, 2> out;
  for (int m = 0; m < 2; ++m) {
    const auto& net = model.nets[std::size_t(m)];
    auto& o = out[std::size_t(m)];
    o.input = inputs[std::size_t(m)];
    auto fwd = net.encoder.forward(o.input);
    o.z = fwd.z;
    if (spec.needs_local_head()) {
      if (!net.local_head) throw ConfigError("model lacks the local head required by " + spec.name());
      o.local_proj = (*net.local_head)(fwd.locals());
    }
    if (spec.needs_global_head()) {
      if (!net.global_head) throw ConfigError("model lacks the global head required by " + spec.name());
      o.global_proj = (*net.global_head)(o.z);
    }
    if (spec.needs_decoder()) {
      if (!net.decoder) throw ConfigError("model lacks the decoder required by " + spec.name());
      o.recon = (*net.decoder)(o.z);
    }
    if (spec.needs_labels()) {
      if (!net.classifier) throw ConfigError("model lacks the classifier required by " + spec.name());
      o.logits = (*net.classifier)(o.z);
    }
  }
  return out;
}

}  // namespace mscl

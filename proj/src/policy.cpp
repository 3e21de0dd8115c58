#include "cpm/policy.hpp"

#include <cmath>
#include <string>

#include "cpm/errors.hpp"

namespace cpm::policy {

using concepts::ConceptKind;
using concepts::ConceptSchema;
using concepts::ConceptSpec;
using whitening::Mode;

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw UsageError(msg);
}

}  // namespace

std::string_view model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::Hard: return "hard";
    case ModelKind::Soft: return "soft";
    case ModelKind::Base: return "base";
  }
  return "?";
}

ModelKind model_kind_from_name(std::string_view name) {
  if (name == "hard") return ModelKind::Hard;
  if (name == "soft") return ModelKind::Soft;
  if (name == "base") return ModelKind::Base;
  throw ConfigError("unknown model kind '" + std::string(name) + "'");
}

ModelKind ConceptPolicyConfig::kind() const {
  if (j() == 0) return ModelKind::Base;
  return k == 0 ? ModelKind::Hard : ModelKind::Soft;
}

void ConceptPolicyConfig::validate() const {
  if (obs_dim < 1) throw ConfigError("policy: obs_dim must be positive");
  if (action_count < 1) throw ConfigError("policy: action_count must be positive");
  if (k < 0) throw ConfigError("policy: residual width must be non-negative");
  if (bottleneck() < 1) throw ConfigError("policy: concept + residual width must be at least 1");
  if (recurrent_size < 1) throw ConfigError("policy: recurrent_size must be positive");
  for (int s : encoder_sizes)
    if (s < 1) throw ConfigError("policy: encoder sizes must be positive");
  for (int s : head_sizes)
    if (s < 1) throw ConfigError("policy: head sizes must be positive");
  if (whitening_iterations < 0) throw ConfigError("policy: whitening iterations must be non-negative");
  if (!(whitening_momentum > 0.0 && whitening_momentum <= 1.0))
    throw ConfigError("policy: whitening momentum must lie in (0, 1]");
  if (!(whitening_eps >= 0.0)) throw ConfigError("policy: whitening eps must be non-negative");
  if (max_sequence_length < 1) throw ConfigError("policy: max_sequence_length must be positive");
}

int soft_bottleneck(int n_per_team) {
  switch (n_per_team) {
    case 2: return 32;
    case 3: return 64;
    case 5: return 96;
    default: throw ConfigError("no soft bottleneck preset for " + std::to_string(n_per_team) + " agents per team");
  }
}

ConceptPolicyConfig preset(int n_per_team, ModelKind kind) {
  ConceptPolicyConfig c;
  c.obs_dim = env::observation_size(n_per_team);
  switch (kind) {
    case ModelKind::Hard:
      c.schema = concepts::build_schema(n_per_team, concepts::ConceptMode::Hard);
      c.k = 0;
      break;
    case ModelKind::Soft:
      c.schema = concepts::build_schema(n_per_team, concepts::ConceptMode::Soft);
      c.k = soft_bottleneck(n_per_team) - c.schema.dim;
      break;
    case ModelKind::Base:
      c.schema = concepts::build_schema_subset(n_per_team, std::span<const std::string>{});
      c.k = 128;
      c.whiten = false;
      break;
  }
  return c;
}

namespace {

template <class Params, class Fn>
void visit_tensors(Params& p, Fn&& fn) {
  for (std::size_t i = 0; i < p.encoder.size(); ++i) {
    fn("encoder." + std::to_string(i) + ".weight", p.encoder[i].weight);
    fn("encoder." + std::to_string(i) + ".bias", p.encoder[i].bias);
  }
  fn("lstm.w_input", p.lstm.w_input);
  fn("lstm.w_hidden", p.lstm.w_hidden);
  fn("lstm.bias", p.lstm.bias);
  fn("concept.weight", p.concept_layer.weight);
  fn("concept.bias", p.concept_layer.bias);
  fn("residual.weight", p.residual_layer.weight);
  fn("residual.bias", p.residual_layer.bias);
  fn("bottleneck.scale", p.scale);
  fn("bottleneck.shift", p.shift);
  for (std::size_t i = 0; i < p.policy_head.size(); ++i) {
    fn("policy." + std::to_string(i) + ".weight", p.policy_head[i].weight);
    fn("policy." + std::to_string(i) + ".bias", p.policy_head[i].bias);
  }
  for (std::size_t i = 0; i < p.value_head.size(); ++i) {
    fn("value." + std::to_string(i) + ".weight", p.value_head[i].weight);
    fn("value." + std::to_string(i) + ".bias", p.value_head[i].bias);
  }
}

}  // namespace

std::vector<PolicyParams::Named> PolicyParams::named_tensors() {
  std::vector<Named> out;
  visit_tensors(*this, [&](std::string name, Matrix& m) { out.push_back({std::move(name), &m}); });
  return out;
}

std::vector<Matrix*> PolicyParams::tensors() {
  std::vector<Matrix*> out;
  visit_tensors(*this, [&](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

std::size_t PolicyParams::parameter_count() const {
  std::size_t n = 0;
  visit_tensors(*this, [&](const std::string&, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

ConceptPolicy make_policy(const ConceptPolicyConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  ConceptPolicy model;
  model.config = config;
  PolicyParams& p = model.params;

  int width = config.obs_dim;
  for (int s : config.encoder_sizes) {
    p.encoder.emplace_back(width, s, true);
    nn::init_dense(p.encoder.back(), rng);
    width = s;
  }
  p.lstm = nn::Lstm(width, config.recurrent_size);
  nn::init_lstm(p.lstm, rng);

  const int H = config.recurrent_size;
  p.concept_layer = nn::Dense(H, config.j(), false);
  p.residual_layer = nn::Dense(H, config.k, false);
  nn::init_dense(p.concept_layer, rng);
  nn::init_dense(p.residual_layer, rng);
  const int affine = config.whiten ? config.bottleneck() : 0;
  p.scale = Matrix::Ones(1, affine);
  p.shift = Matrix::Zero(1, affine);

  auto build_head = [&](std::vector<nn::Dense>& head, int out, double last_scale) {
    int w = config.bottleneck();
    for (int s : config.head_sizes) {
      head.emplace_back(w, s, true);
      nn::init_dense(head.back(), rng);
      w = s;
    }
    head.emplace_back(w, out, false);
    nn::init_dense(head.back(), rng, last_scale);
  };
  build_head(p.policy_head, config.action_count, 0.01);
  build_head(p.value_head, 1, 1.0);

  model.whitening = whitening::WhiteningState(config.bottleneck(), config.whitening_iterations,
                                              config.whitening_momentum, config.whitening_eps);
  return model;
}

std::string_view provenance_name(Provenance p) { return p == Provenance::Oracle ? "oracle" : "manual"; }

Provenance provenance_from_name(std::string_view name) {
  if (name == "oracle") return Provenance::Oracle;
  if (name == "manual") return Provenance::Manual;
  throw ParseError("unknown intervention provenance '" + std::string(name) + "'");
}

bool Intervention::empty() const { return masked_count() == 0; }

std::size_t Intervention::masked_count() const {
  std::size_t n = 0;
  for (bool m : mask) n += m ? 1 : 0;
  return n;
}

void validate_intervention(const ConceptSchema& schema, const Intervention& iv) {
  require(static_cast<int>(iv.mask.size()) == schema.dim && iv.values.size() == schema.dim,
          "intervention: width does not match the concept schema");
  for (const ConceptSpec& spec : schema.specs) {
    for (int m = 0; m < spec.multiplicity; ++m) {
      const concepts::IndexRange g = spec.instance(m);
      int set = 0;
      for (int i = g.begin; i < g.end(); ++i) set += iv.mask[i] ? 1 : 0;
      if (set == 0) continue;
      require(set == g.size, "intervention: " + spec.name + " must be set as a whole group");
      const auto vals = iv.values.segment(g.begin, g.size);
      require(vals.allFinite(), "intervention: " + spec.name + " values must be finite");
      if (spec.kind == ConceptKind::DiscreteGroup) {
        int ones = 0;
        for (Eigen::Index i = 0; i < vals.size(); ++i) {
          require(vals[i] == 0.0 || vals[i] == 1.0, "intervention: " + spec.name + " values must be one-hot");
          ones += vals[i] == 1.0 ? 1 : 0;
        }
        require(ones == 1, "intervention: " + spec.name + " values must be one-hot");
      } else if (spec.kind == ConceptKind::Binary) {
        require(vals[0] >= 0.0 && vals[0] <= 1.0, "intervention: " + spec.name + " must lie in [0, 1]");
      }
    }
  }
}

Intervention apply_oracle_intervention(const Vector& predicted, const Vector& truth, const ConceptSchema& schema,
                                       std::span<const std::string> subset) {
  require(predicted.size() == schema.dim && truth.size() == schema.dim,
          "apply_oracle_intervention: width does not match the concept schema");
  Intervention iv;
  iv.mask.assign(static_cast<std::size_t>(schema.dim), false);
  iv.values = Vector::Zero(schema.dim);
  iv.provenance = Provenance::Oracle;
  for (const std::string& raw : subset) {
    const ConceptSpec& spec = schema.at(concepts::canonical_concept_name(raw));
    for (int i = spec.offset; i < spec.range().end(); ++i) {
      iv.mask[i] = true;
      iv.values[i] = truth[i];
    }
  }
  return iv;
}

Vector apply_intervention(const Vector& concepts, const Intervention& iv) {
  require(static_cast<Eigen::Index>(iv.mask.size()) == concepts.size(), "apply_intervention: width mismatch");
  Vector out = concepts;
  for (Eigen::Index i = 0; i < out.size(); ++i)
    if (iv.mask[i]) out[i] = iv.values[i];
  return out;
}

namespace {

Matrix sigmoid(const Matrix& x) { return (1.0 / (1.0 + (-x.array()).exp())).matrix(); }

std::vector<int> binary_columns(const ConceptSchema& schema) {
  std::vector<int> cols;
  for (const ConceptSpec& s : schema.specs)
    if (s.kind == ConceptKind::Binary)
      for (int i = s.offset; i < s.range().end(); ++i) cols.push_back(i);
  return cols;
}

Matrix concept_activation(const ConceptSchema& schema, const Matrix& a) {
  const std::vector<concepts::IndexRange> groups = schema.softmax_groups();
  Matrix v = nn::groupwise_softmax(a, groups);
  for (int c : binary_columns(schema)) v.col(c) = sigmoid(a.col(c));
  return v;
}

Matrix concept_activation_backward(const ConceptSchema& schema, const Matrix& v, const Matrix& grad_v) {
  const std::vector<concepts::IndexRange> groups = schema.softmax_groups();
  Matrix g = nn::groupwise_softmax_backward(v, groups, grad_v);
  for (int c : binary_columns(schema))
    g.col(c) = (grad_v.col(c).array() * v.col(c).array() * (1.0 - v.col(c).array())).matrix();
  return g;
}

Matrix run_head(const std::vector<nn::Dense>& layers, const Matrix& in, std::vector<nn::DenseCache>* caches) {
  Matrix h = in;
  if (caches != nullptr) caches->assign(layers.size(), {});
  for (std::size_t i = 0; i < layers.size(); ++i)
    h = nn::fc_forward(layers[i], h, caches != nullptr ? &(*caches)[i] : nullptr);
  return h;
}

Matrix head_backward(const std::vector<nn::Dense>& layers, const std::vector<nn::DenseCache>& caches,
                     const Matrix& grad_out, std::vector<nn::DenseGrad>& grads) {
  Matrix g = grad_out;
  for (std::size_t i = layers.size(); i-- > 0;) g = nn::fc_backward(layers[i], caches[i], g, grads[i]);
  return g;
}

struct HeadResult {
  Matrix logits;
  Vector values;
  Matrix concepts;
  Matrix predicted;
  Matrix residual;
};

// Everything after the recurrent core. `white` is null for inference with
// running statistics; otherwise Train-mode whitening writes into it.
HeadResult heads_forward(const ConceptPolicy& model, const Matrix& x, whitening::WhiteningState* white,
                         std::span<const Intervention> interventions, HeadCache* cache) {
  const ConceptPolicyConfig& cfg = model.config;
  const PolicyParams& p = model.params;
  const Eigen::Index N = x.rows();
  const int j = cfg.j();
  const int k = cfg.k;

  Matrix z(N, j + k);
  if (j > 0) z.leftCols(j) = nn::fc_forward(p.concept_layer, x, cache ? &cache->concept_cache : nullptr);
  if (k > 0) z.rightCols(k) = nn::fc_forward(p.residual_layer, x, cache ? &cache->residual_cache : nullptr);

  Matrix a;
  if (cfg.whiten) {
    Matrix w;
    if (white != nullptr) {
      w = whitening::iternorm_forward(z, *white, Mode::Train, cache ? &cache->white_cache : nullptr);
    } else {
      w = (z.rowwise() - model.whitening.running_mean.transpose()) * model.whitening.running_whitener;
    }
    a = (w.array().rowwise() * p.scale.row(0).array()).matrix();
    a.rowwise() += p.shift.row(0);
    if (cache != nullptr) cache->normalized = std::move(w);
  } else {
    a = std::move(z);
  }

  HeadResult r;
  r.predicted = j > 0 ? concept_activation(cfg.schema, a.leftCols(j)) : Matrix(N, 0);
  r.residual = a.rightCols(k);
  r.concepts = r.predicted;
  if (!interventions.empty()) {
    require(static_cast<Eigen::Index>(interventions.size()) == N, "forward: one intervention per row expected");
    for (Eigen::Index b = 0; b < N; ++b) {
      const Intervention& iv = interventions[b];
      if (iv.mask.empty()) continue;
      validate_intervention(cfg.schema, iv);
      for (int i = 0; i < j; ++i)
        if (iv.mask[i]) r.concepts(b, i) = iv.values[i];
    }
  }

  Matrix head_in(N, j + k);
  head_in << r.concepts, r.residual;
  r.logits = run_head(p.policy_head, head_in, cache ? &cache->policy_caches : nullptr);
  r.values = run_head(p.value_head, head_in, cache ? &cache->value_caches : nullptr).col(0);
  if (cache != nullptr) {
    cache->x = x;
    cache->concepts = r.predicted;
    cache->head_in = std::move(head_in);
  }
  return r;
}

}  // namespace

PolicyOutput forward(const ConceptPolicy& model, const Matrix& obs, nn::RecurrentState& hidden,
                     std::span<const Intervention> interventions) {
  const ConceptPolicyConfig& cfg = model.config;
  require(obs.cols() == cfg.obs_dim, "forward: observation has " + std::to_string(obs.cols()) +
                                         " features, policy expects " + std::to_string(cfg.obs_dim));
  require(hidden.h.rows() == obs.rows() && hidden.h.cols() == cfg.recurrent_size,
          "forward: hidden state does not match the batch");
  check_finite(obs, "observation");
  Matrix e = obs;
  for (const nn::Dense& layer : model.params.encoder) e = nn::fc_forward(layer, e);
  const std::vector<Matrix> h = nn::recurrent_forward(model.params.lstm, {e}, hidden);
  HeadResult r = heads_forward(model, h[0], nullptr, interventions, nullptr);
  return {std::move(r.logits), std::move(r.values), std::move(r.concepts), std::move(r.predicted),
          std::move(r.residual)};
}

ActionChoice act(const Eigen::Ref<const RowVector>& logits, Rng& rng, ActMode mode) {
  const Eigen::Index n = logits.size();
  require(n >= 1, "act: empty logits");
  if (!logits.allFinite()) throw NumericError("act: non-finite logits");
  const double peak = logits.maxCoeff();
  const double lse = peak + std::log((logits.array() - peak).exp().sum());

  int choice = 0;
  if (mode == ActMode::Greedy) {
    for (Eigen::Index i = 1; i < n; ++i)
      if (logits[i] > logits[choice]) choice = static_cast<int>(i);
  } else {
    const double u = rng.uniform();
    double cum = 0.0;
    choice = -1;
    for (Eigen::Index i = 0; i < n; ++i) {
      cum += std::exp(logits[i] - lse);
      if (u < cum) {
        choice = static_cast<int>(i);
        break;
      }
    }
    // Rounding can leave cum slightly below u; take the last action with mass.
    if (choice < 0) {
      choice = static_cast<int>(n - 1);
      while (choice > 0 && std::exp(logits[choice] - lse) == 0.0) --choice;
    }
  }
  return {static_cast<env::Action>(choice), choice, logits[choice] - lse};
}

SequenceForward forward_sequence(ConceptPolicy& model, const SequenceBatch& batch, Mode mode) {
  const ConceptPolicyConfig& cfg = model.config;
  const int T = static_cast<int>(batch.obs.size());
  require(T >= 1, "forward_sequence: empty sequence");
  require(static_cast<int>(batch.masks.size()) == T, "forward_sequence: mask count mismatch");
  const Eigen::Index B = batch.obs[0].rows();
  for (const Matrix& o : batch.obs)
    require(o.rows() == B && o.cols() == cfg.obs_dim, "forward_sequence: observation shape mismatch");

  SequenceForward out;
  out.mode = mode;
  Matrix stacked(T * B, cfg.obs_dim);
  for (int t = 0; t < T; ++t) stacked.middleRows(t * B, B) = batch.obs[t];
  check_finite(stacked, "observation");
  out.encoder_caches.assign(model.params.encoder.size(), {});
  for (std::size_t i = 0; i < model.params.encoder.size(); ++i)
    stacked = nn::fc_forward(model.params.encoder[i], stacked, &out.encoder_caches[i]);

  std::vector<Matrix> inputs(T);
  for (int t = 0; t < T; ++t) inputs[t] = stacked.middleRows(t * B, B);
  nn::RecurrentState state = batch.initial;
  const std::vector<Matrix> h =
      nn::recurrent_forward(model.params.lstm, inputs, state, &out.lstm_cache, &batch.masks, cfg.max_sequence_length);

  for (int t = 0; t < T; ++t)
    for (Eigen::Index b = 0; b < B; ++b)
      if (batch.masks[t][b] != 0.0) out.rows.push_back({t, static_cast<int>(b)});
  require(!out.rows.empty(), "forward_sequence: no valid rows");
  Matrix x(static_cast<Eigen::Index>(out.rows.size()), cfg.recurrent_size);
  for (std::size_t r = 0; r < out.rows.size(); ++r) x.row(r) = h[out.rows[r].t].row(out.rows[r].b);

  HeadResult r = heads_forward(model, x, mode == Mode::Train ? &model.whitening : nullptr, {}, &out.head);
  out.logits = std::move(r.logits);
  out.values = std::move(r.values);
  out.concepts = std::move(r.predicted);
  return out;
}

PolicyGrad PolicyGrad::zeros_like(ConceptPolicy& model) {
  PolicyGrad g;
  for (Matrix* m : model.params.tensors()) g.tensors.push_back(Matrix::Zero(m->rows(), m->cols()));
  return g;
}

double PolicyGrad::norm() const {
  double s = 0.0;
  for (const Matrix& m : tensors) s += m.squaredNorm();
  return std::sqrt(s);
}

void PolicyGrad::scale(double factor) {
  for (Matrix& m : tensors) m *= factor;
}

PolicyGrad backward_sequence(const ConceptPolicy& model, const SequenceForward& fwd, const Matrix& d_logits,
                             const Vector& d_values, const Matrix& d_concepts) {
  require(fwd.mode == Mode::Train || !model.config.whiten,
          "backward_sequence: needs a Train-mode forward when whitening is enabled");
  const ConceptPolicyConfig& cfg = model.config;
  const PolicyParams& p = model.params;
  const HeadCache& hc = fwd.head;
  const Eigen::Index N = static_cast<Eigen::Index>(fwd.rows.size());
  const int j = cfg.j();
  const int k = cfg.k;
  require(d_logits.rows() == N && d_logits.cols() == cfg.action_count, "backward_sequence: d_logits shape");
  require(d_values.size() == N, "backward_sequence: d_values shape");
  require(d_concepts.rows() == N && d_concepts.cols() == j, "backward_sequence: d_concepts shape");

  std::vector<nn::DenseGrad> enc_g, pol_g, val_g;
  for (const nn::Dense& l : p.encoder) enc_g.emplace_back(l);
  for (const nn::Dense& l : p.policy_head) pol_g.emplace_back(l);
  for (const nn::Dense& l : p.value_head) val_g.emplace_back(l);
  nn::LstmGrad lstm_g(p.lstm);
  nn::DenseGrad concept_g(p.concept_layer), residual_g(p.residual_layer);
  Matrix scale_g = Matrix::Zero(1, p.scale.cols());
  Matrix shift_g = Matrix::Zero(1, p.shift.cols());

  Matrix d_head_in = head_backward(p.policy_head, hc.policy_caches, d_logits, pol_g);
  Matrix d_val = d_values;
  d_head_in += head_backward(p.value_head, hc.value_caches, d_val, val_g);

  Matrix d_a(N, j + k);
  if (j > 0) d_a.leftCols(j) = concept_activation_backward(cfg.schema, hc.concepts, d_head_in.leftCols(j) + d_concepts);
  if (k > 0) d_a.rightCols(k) = d_head_in.rightCols(k);

  Matrix d_z;
  if (cfg.whiten) {
    scale_g.row(0) = (d_a.array() * hc.normalized.array()).colwise().sum();
    shift_g.row(0) = d_a.colwise().sum();
    const Matrix d_w = (d_a.array().rowwise() * p.scale.row(0).array()).matrix();
    d_z = whitening::iternorm_backward(hc.white_cache, d_w);
  } else {
    d_z = std::move(d_a);
  }

  Matrix d_x = Matrix::Zero(N, cfg.recurrent_size);
  if (j > 0) d_x += nn::fc_backward(p.concept_layer, hc.concept_cache, d_z.leftCols(j), concept_g);
  if (k > 0) d_x += nn::fc_backward(p.residual_layer, hc.residual_cache, d_z.rightCols(k), residual_g);

  const int T = static_cast<int>(fwd.lstm_cache.steps.size());
  const Eigen::Index B = fwd.lstm_cache.steps[0].x.rows();
  std::vector<Matrix> grad_h(T, Matrix::Zero(B, cfg.recurrent_size));
  for (Eigen::Index r = 0; r < N; ++r) grad_h[fwd.rows[r].t].row(fwd.rows[r].b) += d_x.row(r);
  const std::vector<Matrix> d_inputs = nn::recurrent_backward(p.lstm, fwd.lstm_cache, grad_h, lstm_g);

  Matrix d_enc(T * B, p.lstm.input_size());
  for (int t = 0; t < T; ++t) d_enc.middleRows(t * B, B) = d_inputs[t];
  for (std::size_t i = p.encoder.size(); i-- > 0;) d_enc = nn::fc_backward(p.encoder[i], fwd.encoder_caches[i], d_enc, enc_g[i]);

  PolicyGrad g;
  for (const nn::DenseGrad& e : enc_g) {
    g.tensors.push_back(e.weight);
    g.tensors.push_back(e.bias);
  }
  g.tensors.push_back(lstm_g.w_input);
  g.tensors.push_back(lstm_g.w_hidden);
  g.tensors.push_back(lstm_g.bias);
  g.tensors.push_back(concept_g.weight);
  g.tensors.push_back(concept_g.bias);
  g.tensors.push_back(residual_g.weight);
  g.tensors.push_back(residual_g.bias);
  g.tensors.push_back(scale_g);
  g.tensors.push_back(shift_g);
  for (const nn::DenseGrad& e : pol_g) {
    g.tensors.push_back(e.weight);
    g.tensors.push_back(e.bias);
  }
  for (const nn::DenseGrad& e : val_g) {
    g.tensors.push_back(e.weight);
    g.tensors.push_back(e.bias);
  }
  return g;
}

}  // namespace cpm::policy

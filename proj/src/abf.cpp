#include "abound/abf.hpp"

#include "abound/errors.hpp"

#include <algorithm>
#include <cmath>

namespace abound {

void AttackConfig::validate() const {
  if (steps < 0) throw InvalidParameter("attack steps must be >= 0");
  if (!(alpha > 0.0) || !(epsilon >= 0.0) || !(tau > 0.0)) throw InvalidParameter("alpha, tau must be > 0 and epsilon >= 0");
  if (beta < 0.0 || init_noise_scale < 0.0) throw InvalidParameter("beta and init_noise_scale must be >= 0");
}

ad::Var balance_loss(const ad::Var& v, const ad::Var& p_pos, const ad::Var& p_neg) {
  const ad::Var u = ad::l2_normalize(v);
  return ad::abs(ad::sub(ad::dot(u, ad::l2_normalize(p_pos)), ad::dot(u, ad::l2_normalize(p_neg))));
}

double balance_loss(const FeatureVector& v, const FeatureVector& p_pos, const FeatureVector& p_neg) {
  ad::Tape tape;
  return balance_loss(tape.constant(v), tape.constant(p_pos), tape.constant(p_neg)).scalar();
}

ad::Var dispersion_loss(const std::vector<ad::Var>& batch) {
  const std::size_t n = batch.size();
  if (n < 2) throw InvalidBatch("dispersion needs at least two samples");
  std::vector<ad::Var> dists;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) dists.push_back(ad::norm(ad::sub(batch[i], batch[j])));
  }
  return ad::scale(ad::sum(ad::concat_rows(dists)), -2.0 / static_cast<double>(n * (n - 1)));
}

double dispersion_loss(const std::vector<FeatureVector>& batch) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const FeatureVector& v : batch) vars.push_back(tape.constant(v));
  return dispersion_loss(vars).scalar();
}

ad::Var attack_loss(const std::vector<ad::Var>& batch, const ad::Var& p_pos, const ad::Var& p_neg,
                    const AttackConfig& cfg) {
  if (batch.empty()) throw InvalidBatch("empty attack batch");
  ad::Tape& tape = *batch.front().tape();
  ad::Var total = tape.constant(Matrix::Zero(1, 1));
  if (cfg.use_balance) {
    for (const ad::Var& v : batch) total = ad::add(total, balance_loss(v, p_pos, p_neg));
  }
  if (cfg.beta > 0.0) total = ad::add(total, ad::scale(dispersion_loss(batch), cfg.beta));
  return total;
}

namespace {

struct AttackEval {
  double loss;
  std::vector<Matrix> grads;
};

AttackEval evaluate_attack(const std::vector<FeatureVector>& batch, const FeatureVector& p_pos,
                           const FeatureVector& p_neg, const AttackConfig& cfg) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const FeatureVector& v : batch) vars.push_back(tape.leaf(v));
  const ad::Var loss = attack_loss(vars, tape.constant(p_pos), tape.constant(p_neg), cfg);
  tape.backward(loss);
  AttackEval out{loss.scalar(), {}};
  for (const ad::Var& v : vars) {
    out.grads.push_back(v.requires_grad() && v.grad().size() ? v.grad() : Matrix::Zero(v.rows(), 1));
  }
  return out;
}

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace

FenceBatch forge_fence(const std::vector<FeatureVector>& v_cls, const FeatureVector& p_pos,
                       const FeatureVector& p_neg, const AttackConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  if (v_cls.empty() || (cfg.beta > 0.0 && v_cls.size() < 2)) throw InvalidBatch("fence batch needs N >= 2");
  if ((p_pos - p_neg).norm() == 0.0) throw DegenerateAnchors("positive and negative concepts coincide");

  FenceBatch fence;
  fence.originals = v_cls;
  std::uniform_real_distribution<double> noise(-cfg.init_noise_scale, cfg.init_noise_scale);
  std::vector<FeatureVector> cur;
  for (const FeatureVector& v : v_cls) {
    FeatureVector x = v;
    if (cfg.init_noise_scale > 0.0) {
      for (Eigen::Index i = 0; i < x.size(); ++i) x[i] += noise(rng);
    }
    cur.push_back(std::move(x));
  }
  for (const FeatureVector& v : cur) fence.initial_gaps.push_back(balance_loss(v, p_pos, p_neg));

  for (int step = 0; step < cfg.steps; ++step) {
    const AttackEval ev = evaluate_attack(cur, p_pos, p_neg, cfg);
    fence.loss_trace.push_back(ev.loss);
    for (std::size_t i = 0; i < cur.size(); ++i) {
      const Vector& g = ev.grads[i].col(0);
      for (Eigen::Index k = 0; k < cur[i].size(); ++k) {
        const double moved = cur[i][k] - cfg.alpha * sign(g[k]);
        cur[i][k] = std::clamp(moved, v_cls[i][k] - cfg.epsilon, v_cls[i][k] + cfg.epsilon);
      }
    }
  }
  fence.final_loss = evaluate_attack(cur, p_pos, p_neg, cfg).loss;
  fence.loss_trace.push_back(fence.final_loss);
  for (const FeatureVector& v : cur) fence.gaps.push_back(balance_loss(v, p_pos, p_neg));
  fence.forged = std::move(cur);
  return fence;
}

ad::Var abf_entropy_loss(ad::Tape& tape, const FenceBatch& fence, const ad::Var& p_pos, const ad::Var& p_neg,
                         double tau) {
  if (fence.forged.empty()) throw InvalidBatch("empty fence");
  const ad::Var pos = ad::l2_normalize(p_pos);
  const ad::Var neg = ad::l2_normalize(p_neg);
  std::vector<ad::Var> terms;
  for (const FeatureVector& v : fence.forged) {
    const ad::Var u = tape.constant(l2_normalize(v));
    const ad::Var logits = ad::transpose(ad::concat_rows({ad::dot(u, pos), ad::dot(u, neg)}));
    const ad::Var probs = ad::softmax_rows(logits, tau);
    terms.push_back(ad::sum(ad::mul(probs, ad::log_floor(probs))));
  }
  return ad::mean(ad::concat_rows(terms));
}

double abf_entropy_loss(const FenceBatch& fence, const FeatureVector& p_pos, const FeatureVector& p_neg, double tau) {
  ad::Tape tape;
  return abf_entropy_loss(tape, fence, tape.constant(p_pos), tape.constant(p_neg), tau).scalar();
}

double mean_fence_entropy(const FenceBatch& fence, const FeatureVector& p_pos, const FeatureVector& p_neg, double tau) {
  return -abf_entropy_loss(fence, p_pos, p_neg, tau);
}

nlohmann::json to_json(const FenceBatch& fence) {
  return nlohmann::json{{"count", fence.forged.size()},
                        {"loss_trace", fence.loss_trace},
                        {"final_loss", fence.final_loss},
                        {"initial_gaps", fence.initial_gaps},
                        {"gaps", fence.gaps}};
}

}  // namespace abound

#include "abound/cbl.hpp"

#include "abound/errors.hpp"

#include <cmath>

namespace abound {

void LossWeights::validate() const {
  for (const double w : {abf, psg, seg}) {
    if (!std::isfinite(w) || w < 0.0) throw InvalidParameter("loss weights must be finite and >= 0");
  }
}

ad::Var psg_text_loss(const ad::Var& q_pos, const ad::Var& q_neg, const ad::Var& m_pos, const ad::Var& m_neg) {
  const ad::Var aligned = ad::add(ad::cosine(q_pos, m_pos), ad::cosine(q_neg, m_neg));
  const ad::Var crossed = ad::add(ad::cosine(q_neg, m_pos), ad::cosine(q_pos, m_neg));
  return ad::scale(ad::add_scalar(ad::sub(crossed, aligned), 2.0), 0.25);
}

double psg_text_loss(const FeatureVector& q_pos, const FeatureVector& q_neg, const FeatureVector& m_pos,
                     const FeatureVector& m_neg) {
  ad::Tape t;
  return psg_text_loss(t.constant(q_pos), t.constant(q_neg), t.constant(m_pos), t.constant(m_neg)).scalar();
}

namespace {

// Mean over rows of -log softmax(S)_ii.
ad::Var identity_cross_entropy(const ad::Var& s) {
  const ad::Var logp = ad::log_softmax_rows(s);
  Matrix eye = Matrix::Identity(s.rows(), s.cols());
  return ad::scale(ad::sum(ad::mul(logp, s.tape()->constant(std::move(eye)))), -1.0 / static_cast<double>(s.rows()));
}

Matrix mask_column(const Mask& mask) {
  Matrix y(static_cast<Eigen::Index>(mask.size()), 1);
  for (std::size_t i = 0; i < mask.size(); ++i) y(static_cast<Eigen::Index>(i), 0) = mask[i] ? 1.0 : 0.0;
  return y;
}

void check_sizes(const ad::Var& pred, const Mask& mask) {
  if (pred.cols() != 1 || pred.rows() != static_cast<Eigen::Index>(mask.size())) {
    throw FormatError("prediction map and mask sizes differ");
  }
}

}  // namespace

ad::Var grounding_term(const ad::Var& tokens, const ad::Var& patches) {
  const ad::Var attn = ad::softmax_rows(ad::matmul(tokens, ad::transpose(patches)));
  const ad::Var grouped = ad::matmul(attn, patches);
  const ad::Var s_ti = ad::matmul(tokens, ad::transpose(grouped));
  const ad::Var s_it = ad::matmul(grouped, ad::transpose(tokens));
  return ad::scale(ad::add(identity_cross_entropy(s_ti), identity_cross_entropy(s_it)), 0.5);
}

ad::Var psg_finegrained_loss(const ad::Var& tokens_pos, const ad::Var& tokens_neg, const ad::Var& patches) {
  return ad::scale(ad::add(grounding_term(tokens_pos, patches), grounding_term(tokens_neg, patches)), 0.5);
}

double psg_finegrained_loss(const Matrix& tokens_pos, const Matrix& tokens_neg, const Matrix& patches) {
  ad::Tape t;
  return psg_finegrained_loss(t.constant(tokens_pos), t.constant(tokens_neg), t.constant(patches)).scalar();
}

ad::Var abnormality_map(const ad::Var& cells, const ad::Var& p_pos, const ad::Var& p_neg, double tau) {
  const ad::Var sim_neg = ad::matmul(cells, ad::l2_normalize(p_neg));
  const ad::Var sim_pos = ad::matmul(cells, ad::l2_normalize(p_pos));
  // softmax over two logits: first entry = sigmoid((a - b) / tau).
  return ad::sigmoid(ad::scale(ad::sub(sim_neg, sim_pos), 1.0 / tau));
}

ad::Var focal_loss(const ad::Var& pred, const Mask& mask) {
  check_sizes(pred, mask);
  ad::Tape& t = *pred.tape();
  const Matrix y = mask_column(mask);
  const Matrix ones = Matrix::Ones(y.rows(), 1);
  // p_t = y p + (1 - y)(1 - p); alpha_t = y alpha + (1 - y)(1 - alpha).
  const ad::Var y_var = t.constant(2.0 * y - ones);
  const ad::Var p_t = ad::add(ad::mul(pred, y_var), t.constant(ones - y));
  const Matrix alpha_t = kFocalAlpha * y + (1.0 - kFocalAlpha) * (ones - y);
  const ad::Var miss = ad::add_scalar(ad::scale(p_t, -1.0), 1.0);
  const ad::Var modulating = ad::square(miss);  // gamma = 2
  const ad::Var terms = ad::mul(ad::mul(t.constant(alpha_t), modulating), ad::log_floor(p_t));
  return ad::scale(ad::mean(terms), -1.0);
}

ad::Var dice_loss(const ad::Var& pred, const Mask& mask) {
  check_sizes(pred, mask);
  ad::Tape& t = *pred.tape();
  const Matrix y = mask_column(mask);
  const ad::Var inter = ad::dot(pred, t.constant(y));
  const ad::Var num = ad::add_scalar(ad::scale(inter, 2.0), kDiceSmooth);
  const double denom_const = y.sum() + kDiceSmooth;
  const ad::Var denom = ad::add_scalar(ad::sum(pred), denom_const);
  return ad::add_scalar(ad::scale(ad::div(num, denom), -1.0), 1.0);
}

ad::Var seg_loss(const ad::Var& pred, const Mask& mask) { return ad::add(focal_loss(pred, mask), dice_loss(pred, mask)); }

double seg_loss(const Vector& pred, const Mask& mask) {
  ad::Tape t;
  return seg_loss(t.constant(pred), mask).scalar();
}

double cbl_total(double l_abf, double l_psg, double l_seg, const LossWeights& w) {
  return w.abf * l_abf + w.psg * l_psg + w.seg * l_seg;
}

ad::Var cbl_total(const ad::Var& l_abf, const ad::Var& l_psg, const ad::Var& l_seg, const LossWeights& w) {
  return ad::add(ad::add(ad::scale(l_abf, w.abf), ad::scale(l_psg, w.psg)), ad::scale(l_seg, w.seg));
}

}  // namespace abound

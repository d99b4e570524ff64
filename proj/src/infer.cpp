#include "abound/infer.hpp"

#include "abound/errors.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace abound {

void InferConfig::validate() const {
  if (!std::isfinite(text_weight) || !std::isfinite(vis_weight) || text_weight < 0.0 || vis_weight < 0.0) {
    throw InvalidParameter("map weights must be finite and >= 0");
  }
  if (!(shrinkage >= 0.0 && shrinkage <= 1.0)) throw InvalidParameter("shrinkage must lie in [0, 1]");
  if (!(tau > 0.0)) throw InvalidParameter("tau must be > 0");
}

double ClassGaussian::log_likelihood(const FeatureVector& x) const {
  const FeatureVector d = x - mu;
  const double maha = d.dot(inverse * d);
  return -0.5 * (maha + log_det + static_cast<double>(mu.size()) * std::log(2.0 * std::numbers::pi));
}

ClassGaussian make_gaussian(const FeatureVector& mu, const Matrix& sigma) {
  const Eigen::LLT<Matrix> llt(sigma);
  if (llt.info() != Eigen::Success) throw DegenerateInput("covariance is not positive definite");
  ClassGaussian g;
  g.mu = mu;
  g.sigma = sigma;
  g.inverse = llt.solve(Matrix::Identity(sigma.rows(), sigma.cols()));
  g.log_det = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return g;
}

ClassGaussian fit_gaussian(const std::vector<FeatureVector>& samples, double shrinkage) {
  if (samples.empty()) throw DegenerateInput("no samples for Gaussian fit");
  const Eigen::Index d = samples.front().size();
  FeatureVector mu = FeatureVector::Zero(d);
  for (const FeatureVector& x : samples) mu += x;
  mu /= static_cast<double>(samples.size());
  Matrix sigma = Matrix::Identity(d, d);
  if (samples.size() > 1) {
    Matrix emp = Matrix::Zero(d, d);
    for (const FeatureVector& x : samples) emp += (x - mu) * (x - mu).transpose();
    emp /= static_cast<double>(samples.size() - 1);
    const double tr = emp.trace();
    if (tr > 0.0) {
      sigma = (1.0 - shrinkage) * emp + shrinkage * (tr / static_cast<double>(d)) * Matrix::Identity(d, d);
    }
  }
  return make_gaussian(mu, sigma);
}

std::vector<ClassGaussian> fit_class_gaussians(const EmbeddingBundle& bundle, const Model& model, double shrinkage) {
  std::vector<ClassGaussian> out;
  for (const ClassRecord& c : bundle.classes) {
    std::vector<FeatureVector> xs;
    for (const Sample& s : c.train_normals) xs.push_back(model.adapt_global(s.global));
    out.push_back(fit_gaussian(xs, shrinkage));
  }
  return out;
}

int identify_class(const FeatureVector& x, const std::vector<ClassGaussian>& gaussians) {
  if (gaussians.empty()) throw MissingBank("no class distributions fitted");
  int best = 0;
  double best_ll = gaussians.front().log_likelihood(x);
  for (std::size_t k = 1; k < gaussians.size(); ++k) {
    const double ll = gaussians[k].log_likelihood(x);
    if (ll > best_ll) {
      best_ll = ll;
      best = static_cast<int>(k);
    }
  }
  return best;
}

const ClassBank& MemoryBanks::at(int class_id) const {
  if (class_id < 0 || class_id >= static_cast<int>(classes.size()) || classes[static_cast<std::size_t>(class_id)].patches.empty()) {
    throw MissingBank("no memory bank for class id " + std::to_string(class_id));
  }
  return classes[static_cast<std::size_t>(class_id)];
}

MemoryBanks build_banks(const EmbeddingBundle& bundle, const Model& model, const InferConfig& cfg) {
  cfg.validate();
  MemoryBanks banks;
  const std::vector<ClassGaussian> gaussians = fit_class_gaussians(bundle, model, cfg.shrinkage);
  for (std::size_t c = 0; c < bundle.classes.size(); ++c) {
    const ClassRecord& rec = bundle.classes[c];
    ClassBank bank;
    bank.name = rec.name;
    bank.gaussian = gaussians[c];
    const Eigen::Index n = static_cast<Eigen::Index>(rec.train_normals.size()) * bundle.cells();
    FeatureVector pos = FeatureVector::Zero(bundle.dim);
    FeatureVector neg = FeatureVector::Zero(bundle.dim);
    for (int l = 0; l < bundle.layers; ++l) bank.patches.emplace_back(n, bundle.dim);
    for (std::size_t i = 0; i < rec.train_normals.size(); ++i) {
      const Sample& s = rec.train_normals[i];
      for (int l = 0; l < bundle.layers; ++l) {
        bank.patches[static_cast<std::size_t>(l)].middleRows(static_cast<Eigen::Index>(i) * bundle.cells(), bundle.cells()) =
            model.adapt_patches(s.patches[static_cast<std::size_t>(l)], l);
      }
      const ConceptPair cp = mean_concepts(model.dcf, model.proxy, model.adapt_global(s.global), static_cast<int>(c));
      pos += cp.pos;
      neg += cp.neg;
    }
    bank.text_pos = l2_normalize(pos);
    bank.text_neg = l2_normalize(neg);
    banks.classes.push_back(std::move(bank));
  }
  return banks;
}

void fuse_maps(AnomalyMap& map, const InferConfig& cfg) {
  map.combined = cfg.text_weight * map.text + cfg.vis_weight * map.vis;
  map.score = map.combined.size() > 0 ? map.combined.maxCoeff() : 0.0;
}

AnomalyMap score_image_as(const Sample& sample, int class_id, const MemoryBanks& banks, const Model& model,
                          const InferConfig& cfg) {
  const ClassBank& bank = banks.at(class_id);
  const Eigen::Index cells = sample.patches.front().rows();
  const int layers = static_cast<int>(sample.patches.size());

  Matrix avg = Matrix::Zero(cells, sample.patches.front().cols());
  Vector vis = Vector::Zero(cells);
  for (int l = 0; l < layers; ++l) {
    const Matrix u = model.adapt_patches(sample.patches[static_cast<std::size_t>(l)], l);
    avg += u;
    const Matrix sims = u * bank.patches[static_cast<std::size_t>(l)].transpose();
    for (Eigen::Index i = 0; i < cells; ++i) {
      const double best = std::clamp(sims.row(i).maxCoeff(), -1.0, 1.0);
      vis[i] += std::max(0.0, 1.0 - best);
    }
  }
  vis /= static_cast<double>(layers);

  // Instance concepts fused with the stored text bank.
  const ConceptPair inst = mean_concepts(model.dcf, model.proxy, model.adapt_global(sample.global), class_id);
  const FeatureVector pos = l2_normalize(inst.pos + bank.text_pos);
  const FeatureVector neg = l2_normalize(inst.neg + bank.text_neg);

  Vector text(cells);
  for (Eigen::Index i = 0; i < cells; ++i) {
    const FeatureVector u = l2_normalize(FeatureVector(avg.row(i).transpose()));
    const Vector logits{{cosine_sim(u, neg), cosine_sim(u, pos)}};
    text[i] = softmax_temp(logits, cfg.tau)[0];
  }

  AnomalyMap map;
  map.class_pred = class_id;
  map.text = std::move(text);
  map.vis = std::move(vis);
  fuse_maps(map, cfg);
  return map;
}

AnomalyMap score_image(const Sample& sample, const MemoryBanks& banks, const Model& model, const InferConfig& cfg) {
  std::vector<ClassGaussian> gaussians;
  for (const ClassBank& b : banks.classes) gaussians.push_back(b.gaussian);
  const int k = identify_class(model.adapt_global(sample.global), gaussians);
  return score_image_as(sample, k, banks, model, cfg);
}

}  // namespace abound

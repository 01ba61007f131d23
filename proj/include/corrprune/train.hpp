#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <corrprune/checkpoint.hpp>
#include <corrprune/corrfile.hpp>
#include <corrprune/geometry.hpp>
#include <corrprune/metrics.hpp>
#include <corrprune/model.hpp>
#include <corrprune/rng.hpp>

namespace corrprune {

// ---------------------------------------------------------------------------
// First-order adaptive-moment optimizer with bias correction. Weight decay
// defaults to zero. Moment state is keyed by ParamMap insertion order, so the
// optimizer must be constructed against the same collection it later steps.

struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  int64_t t = 0;
  std::vector<std::vector<double>> m, v;

  explicit Adam(const ParamMap& pm, double lr_in = 1e-3) : lr(lr_in) {
    m.resize(pm.size());
    v.resize(pm.size());
    for (size_t i = 0; i < pm.size(); ++i) {
      size_t n = static_cast<size_t>(pm.items[i].second.numel());
      m[i].assign(n, 0.0);
      v[i].assign(n, 0.0);
    }
  }

  // One update from the gradients currently stored on the parameters.
  // Buffers without a gradient this step (running statistics, untouched
  // branches) are skipped and their moment state stays frozen.
  void step(ParamMap& pm) {
    CP_CHECK(pm.size() == m.size(), "optimizer was built for a different parameter set");
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, double(t));
    const double bc2 = 1.0 - std::pow(beta2, double(t));
    for (size_t i = 0; i < pm.size(); ++i) {
      Tensor& p = pm.items[i].second;
      if (!p.requires_grad() || !p.has_grad()) continue;
      const double* g = p.grad();
      double* w = p.data();
      const size_t n = static_cast<size_t>(p.numel());
      auto& mi = m[i];
      auto& vi = v[i];
      for (size_t j = 0; j < n; ++j) {
        const double gj = g[j] + weight_decay * w[j];
        mi[j] = beta1 * mi[j] + (1.0 - beta1) * gj;
        vi[j] = beta2 * vi[j] + (1.0 - beta2) * gj * gj;
        w[j] -= lr * (mi[j] / bc1) / (std::sqrt(vi[j] / bc2) + eps);
      }
    }
  }
};

inline void zero_grads(ParamMap& pm) {
  for (auto& [name, t] : pm.items) t.zero_grad();
}

// ---------------------------------------------------------------------------
// Evaluation harness. Classification metrics come from the full-size
// verification mask under the estimated essential matrix; the pose is either
// the model's weighted estimate or a robust re-fit over the predicted true
// correspondences (the default reporting path). Failed estimation counts as
// a 180-degree error so it cannot silently inflate the area-under-curve.

enum class PoseSource { weighted, ransac };

struct EvalOptions {
  PoseSource pose = PoseSource::ransac;
  int ransac_iters = 1000;
  double tau = 1e-4;
  uint64_t seed = 0;
  std::vector<int> thresholds = {5, 10, 20};
};

inline PairMetrics evaluate_pair(const CorrAdaptor& model, const CorrRecord& rec,
                                 const EvalOptions& opt, uint64_t pair_seed) {
  CP_CHECK(rec.has_labels && rec.has_gt,
           "evaluation requires labels and a ground-truth pose");
  NoGradGuard ng;
  PairMetrics pm;  // defaults: zero P/R/F, 180 degrees, pose_ok = false
  ModelOutput out;
  try {
    out = model.forward(rec.correspondences, /*training=*/false);
  } catch (const Error&) {
    return pm;  // pruning left fewer than 8 candidates
  }
  if (!out.pose_ok) return pm;

  Prf prf = prf_metrics(out.inlier_mask, rec.labels);
  pm.precision = prf.precision;
  pm.recall = prf.recall;
  pm.fscore = prf.fscore;

  std::vector<Correspondence> predicted;
  for (size_t i = 0; i < out.inlier_mask.size(); ++i)
    if (out.inlier_mask[i]) predicted.push_back(rec.correspondences[i]);

  try {
    EssentialMatrix e;
    std::vector<Correspondence> support;
    if (opt.pose == PoseSource::weighted) {
      e = out.e_hat;
      support = predicted;
    } else {
      RansacResult rr =
          ransac_essential(predicted, opt.ransac_iters, opt.tau, pair_seed);
      e = rr.e;
      for (size_t i = 0; i < predicted.size(); ++i)
        if (rr.mask[i]) support.push_back(predicted[i]);
    }
    RelativePose est = decompose_essential(e, support);
    auto [rot_err, trans_err] = pose_error(est, rec.pose);
    pm.pose_err_deg = std::max(rot_err, trans_err);
    pm.pose_ok = true;
  } catch (const Error&) {
    // too few predicted inliers, no consensus, or no positive-depth majority
  }
  return pm;
}

// No-model baseline: robust fit over the raw candidate set, scored the same
// way as the learned pipeline.
inline PairMetrics evaluate_ransac_pair(const CorrRecord& rec,
                                        const EvalOptions& opt,
                                        uint64_t pair_seed) {
  CP_CHECK(rec.has_labels && rec.has_gt,
           "evaluation requires labels and a ground-truth pose");
  PairMetrics pm;
  try {
    RansacResult rr = ransac_essential(rec.correspondences, opt.ransac_iters,
                                       opt.tau, pair_seed);
    Prf prf = prf_metrics(rr.mask, rec.labels);
    pm.precision = prf.precision;
    pm.recall = prf.recall;
    pm.fscore = prf.fscore;
    std::vector<Correspondence> support;
    for (size_t i = 0; i < rr.mask.size(); ++i)
      if (rr.mask[i]) support.push_back(rec.correspondences[i]);
    RelativePose est = decompose_essential(rr.e, support);
    auto [rot_err, trans_err] = pose_error(est, rec.pose);
    pm.pose_err_deg = std::max(rot_err, trans_err);
    pm.pose_ok = true;
  } catch (const Error&) {
    // no consensus or no positive-depth majority: scored as a 180-degree miss
  }
  return pm;
}

namespace detail {

template <class PairFn>
MetricsReport aggregate_pairs(const std::vector<CorrRecord>& recs,
                              const EvalOptions& opt, PairFn&& fn) {
  CP_CHECK(!recs.empty(), "evaluation needs at least one pair");
  MetricsReport rep;
  std::vector<double> errors;
  errors.reserve(recs.size());
  for (size_t i = 0; i < recs.size(); ++i) {
    uint64_t pair_seed = splitmix64(opt.seed ^ splitmix64(uint64_t(i) + 1));
    PairMetrics pm = fn(recs[i], pair_seed);
    rep.precision += pm.precision;
    rep.recall += pm.recall;
    rep.fscore += pm.fscore;
    errors.push_back(pm.pose_err_deg);
    rep.rows.push_back(pm);
  }
  const double inv = 1.0 / double(recs.size());
  rep.precision *= inv;
  rep.recall *= inv;
  rep.fscore *= inv;
  rep.auc = pose_auc(errors, opt.thresholds);
  return rep;
}

}  // namespace detail

inline MetricsReport evaluate_records(const CorrAdaptor& model,
                                      const std::vector<CorrRecord>& recs,
                                      const EvalOptions& opt = {}) {
  return detail::aggregate_pairs(
      recs, opt, [&](const CorrRecord& r, uint64_t s) {
        return evaluate_pair(model, r, opt, s);
      });
}

inline MetricsReport evaluate_ransac_records(const std::vector<CorrRecord>& recs,
                                             const EvalOptions& opt = {}) {
  return detail::aggregate_pairs(
      recs, opt, [&](const CorrRecord& r, uint64_t s) {
        return evaluate_ransac_pair(r, opt, s);
      });
}

// ---------------------------------------------------------------------------
// Training loop: per-pair gradient accumulation in fixed order, adaptive
// moments at a constant learning rate, and a regression-term weight that is
// held at zero for the first warmup fraction of steps. Pairs whose final
// eigensolve degenerates contribute only the classification term that step.

struct TrainConfig {
  int64_t steps = 2000;
  int64_t batch = 8;
  double lr = 1e-3;
  double warmup_frac = 0.1;  // regression weight is 0 for this head of steps
  int64_t n_virtual = 100;
  uint64_t seed = 0;
  std::string log_path;        // JSONL step + validation log; empty disables
  std::string checkpoint_path; // written once after the final step; empty disables
  EvalOptions val;             // validation uses the weighted pose for speed
  TrainConfig() { val.pose = PoseSource::weighted; }
};

struct TrainResult {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> step_losses;  // batch-mean objective per step
  int64_t epochs = 0;
};

namespace detail {

inline void json_num(std::string& line, const char* key, double v,
                     bool first = false) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  if (!first) line += ',';
  line += '"';
  line += key;
  line += "\":";
  line += buf;
}

// Shuffled index stream; reshuffles in place when a pass completes.
struct IndexStream {
  std::vector<size_t> perm;
  size_t pos = 0;
  Rng rng;
  IndexStream(size_t n, uint64_t seed) : rng(seed) {
    perm.resize(n);
    std::iota(perm.begin(), perm.end(), size_t(0));
    rng.shuffle(perm);
  }
  size_t next() {
    if (pos == perm.size()) {
      rng.shuffle(perm);
      pos = 0;
    }
    return perm[pos++];
  }
};

}  // namespace detail

// Trains in place. `val` may be empty, which disables per-epoch validation.
// An epoch is ceil(|train| / batch) steps. Non-finite losses abort with the
// step and component values in the message.
inline TrainResult train_model(CorrAdaptor& model,
                               const std::vector<CorrRecord>& train,
                               const std::vector<CorrRecord>& val,
                               const TrainConfig& tc) {
  CP_CHECK(!train.empty(), "training set is empty");
  CP_CHECK(tc.steps >= 1, "steps must be >= 1");
  CP_CHECK(tc.batch >= 1, "batch must be >= 1");
  CP_CHECK(tc.warmup_frac >= 0.0 && tc.warmup_frac <= 1.0,
           "warmup_frac must lie in [0, 1]");
  for (const CorrRecord& r : train)
    CP_CHECK(r.has_labels && r.has_gt,
             "training pairs need labels and a ground-truth pose");

  ParamMap params;
  model.collect(params);
  Adam opt(params, tc.lr);

  std::ofstream log;
  if (!tc.log_path.empty()) {
    log.open(tc.log_path);
    CP_CHECK(log.good(), "cannot open training log '" << tc.log_path << "'");
  }

  detail::IndexStream stream(train.size(), splitmix64(tc.seed ^ 0x7261696e));
  const int64_t steps_per_epoch =
      (int64_t(train.size()) + tc.batch - 1) / tc.batch;
  const int64_t warmup_steps = int64_t(tc.warmup_frac * double(tc.steps));
  const double inv_batch = 1.0 / double(tc.batch);

  TrainResult res;
  res.step_losses.reserve(static_cast<size_t>(tc.steps));

  for (int64_t step = 1; step <= tc.steps; ++step) {
    const double lambda = step <= warmup_steps ? 0.0 : model.cfg.lambda;
    zero_grads(params);
    double cls_sum = 0.0, reg_sum = 0.0, total_sum = 0.0;
    int64_t reg_pairs = 0;

    for (int64_t b = 0; b < tc.batch; ++b) {
      const CorrRecord& rec = train[stream.next()];
      ModelOutput out = model.forward(rec.correspondences, /*training=*/true);
      Tensor cls = classification_loss(out.prune_states, rec.labels);
      Tensor total = cls;
      double reg_v = 0.0;
      if (out.pose_ok) {
        EssentialMatrix e_gt = compose_essential(rec.pose);
        Tensor reg = regression_loss(out.e_vec, e_gt, tc.n_virtual);
        reg_v = reg.data()[0];
        ++reg_pairs;
        if (lambda > 0.0) total = hybrid_loss(cls, reg, lambda);
      }
      const double cls_v = cls.data()[0];
      const double total_v = total.data()[0];
      CP_CHECK(std::isfinite(cls_v) && std::isfinite(reg_v) &&
                   std::isfinite(total_v),
               "non-finite loss at step " << step << ": cls=" << cls_v
                                          << " reg=" << reg_v
                                          << " total=" << total_v);
      cls_sum += cls_v;
      reg_sum += reg_v;
      total_sum += total_v;
      mul_scalar(total, inv_batch).backward();
    }
    opt.step(params);

    const double mean_total = total_sum * inv_batch;
    res.step_losses.push_back(mean_total);
    if (step == 1) res.initial_loss = mean_total;
    res.final_loss = mean_total;

    if (log.is_open()) {
      std::string line = "{";
      detail::json_num(line, "step", double(step), true);
      detail::json_num(line, "loss_cls", cls_sum * inv_batch);
      detail::json_num(line, "loss_reg",
                       reg_pairs > 0 ? reg_sum / double(reg_pairs) : 0.0);
      detail::json_num(line, "loss_total", mean_total);
      line += "}\n";
      log << line;
    }

    if (step % steps_per_epoch == 0 || step == tc.steps) {
      const int64_t epoch = (step + steps_per_epoch - 1) / steps_per_epoch;
      res.epochs = epoch;
      if (!val.empty() && log.is_open()) {
        MetricsReport rep = evaluate_records(model, val, tc.val);
        std::string line = "{";
        detail::json_num(line, "epoch", double(epoch), true);
        detail::json_num(line, "precision", rep.precision);
        detail::json_num(line, "recall", rep.recall);
        detail::json_num(line, "fscore", rep.fscore);
        detail::json_num(line, "auc5", rep.auc.at(5));
        detail::json_num(line, "auc10", rep.auc.at(10));
        detail::json_num(line, "auc20", rep.auc.at(20));
        line += "}\n";
        log << line;
      }
    }
  }

  if (!tc.checkpoint_path.empty()) save_checkpoint(tc.checkpoint_path, params);
  if (log.is_open()) {
    log.flush();
    CP_CHECK(log.good(), "failed writing training log '" << tc.log_path << "'");
  }
  return res;
}

}  // namespace corrprune

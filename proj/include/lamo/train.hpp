#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "lamo/data.hpp"
#include "lamo/model.hpp"

namespace lamo {

enum class LossKind { RelL2, RelL2PlusGdl };

struct TrainConfig {
  int epochs = 100;
  int batch_size = 16;
  double max_lr = 1e-3;
  double weight_decay = 1e-4;
  double pct_start = 0.3;
  double div_factor = 25.0;
  double final_div = 1e4;
  double grad_clip = 1.0;  // global norm; 0 disables
  LossKind loss = LossKind::RelL2;
  double gdl_weight = 0.1;
  std::uint64_t seed = 0;
  int checkpoint_every = 25;
  bool log_steps = false;

  void validate() const {
    if (epochs < 1 || batch_size < 1) throw ContractError("train config: epochs/batch_size must be positive");
    if (!(max_lr > 0)) throw ContractError("train config: max_lr must be positive");
    if (!(pct_start > 0 && pct_start < 1)) throw ContractError("train config: pct_start must lie in (0,1)");
    if (div_factor <= 0 || final_div <= 0) throw ContractError("train config: div factors must be positive");
    if (gdl_weight < 0 || grad_clip < 0) throw ContractError("train config: negative weight");
  }
};

inline std::string loss_name(LossKind k) { return k == LossKind::RelL2 ? "rel_l2" : "rel_l2_plus_gdl"; }
inline LossKind loss_from(const std::string& s) {
  if (s == "rel_l2") return LossKind::RelL2;
  if (s == "rel_l2_plus_gdl") return LossKind::RelL2PlusGdl;
  throw ContractError("unknown loss '" + s + "' (rel_l2|rel_l2_plus_gdl)");
}

inline std::string train_config_echo(const TrainConfig& c) {
  std::ostringstream os;
  os << "epochs = " << c.epochs << "\n";
  os << "batch_size = " << c.batch_size << "\n";
  os << "max_lr = " << c.max_lr << "\n";
  os << "weight_decay = " << c.weight_decay << "\n";
  os << "pct_start = " << c.pct_start << "\n";
  os << "div_factor = " << c.div_factor << "\n";
  os << "final_div = " << c.final_div << "\n";
  os << "grad_clip = " << c.grad_clip << "\n";
  os << "loss = " << loss_name(c.loss) << "\n";
  os << "gdl_weight = " << c.gdl_weight << "\n";
  os << "train_seed = " << c.seed << "\n";
  os << "checkpoint_every = " << c.checkpoint_every << "\n";
  os << "log_steps = " << (c.log_steps ? 1 : 0) << "\n";
  return os.str();
}

inline bool train_config_set(TrainConfig& c, const std::string& key, const std::string& value) {
  if (key == "epochs") c.epochs = std::stoi(value);
  else if (key == "batch_size") c.batch_size = std::stoi(value);
  else if (key == "max_lr") c.max_lr = std::stod(value);
  else if (key == "weight_decay") c.weight_decay = std::stod(value);
  else if (key == "pct_start") c.pct_start = std::stod(value);
  else if (key == "div_factor") c.div_factor = std::stod(value);
  else if (key == "final_div") c.final_div = std::stod(value);
  else if (key == "grad_clip") c.grad_clip = std::stod(value);
  else if (key == "loss") c.loss = loss_from(value);
  else if (key == "gdl_weight") c.gdl_weight = std::stod(value);
  else if (key == "train_seed") c.seed = std::stoull(value);
  else if (key == "checkpoint_every") c.checkpoint_every = std::stoi(value);
  else if (key == "log_steps") c.log_steps = std::stoi(value) != 0;
  else return false;
  return true;
}

inline std::vector<std::string> train_config_keys() {
  return {"epochs", "batch_size", "max_lr", "weight_decay", "pct_start", "div_factor", "final_div",
          "grad_clip", "loss", "gdl_weight", "train_seed", "checkpoint_every", "log_steps"};
}

// -------------------------------------------------------------------------
// Losses
// -------------------------------------------------------------------------

/// ||pred - truth||_2 / ||truth||_2 for one sample (all axes flattened).
template <class S>
double rel_l2_metric(const Tensor<S>& pred, const Tensor<S>& truth) {
  detail::check_same_shape(pred, truth, "rel_l2");
  const double denom = std::max(static_cast<double>(norm2(truth)), 1e-8);
  return static_cast<double>(norm2(sub(pred, truth))) / denom;
}

template <class S>
Var<S> rel_l2_loss(const Var<S>& pred, const Tensor<S>& truth) {
  detail::check_same_shape(pred->value, truth, "rel_l2");
  const double denom = std::max(static_cast<double>(norm2(truth)), 1e-8);
  auto diff = sub(pred, constant(truth));
  return scale(sqrt_elem(sum_all(mul(diff, diff))), 1.0 / denom);
}

/// Relative L2 between the central-difference spatial gradients of pred and
/// truth, both x and y components stacked.
template <class S>
Var<S> gdl_loss(const Var<S>& pred, const Tensor<S>& truth, Index h, Index w) {
  auto gp = spatial_gradients(pred, h, w);
  Tensor<S> gt = spatial_gradients(constant(truth), h, w)->value;
  const double denom = std::max(static_cast<double>(norm2(gt)), 1e-8);
  auto diff = sub(gp, constant(gt));
  return scale(sqrt_elem(sum_all(mul(diff, diff))), 1.0 / denom);
}

template <class S>
Var<S> sample_loss(const Var<S>& pred, const Tensor<S>& truth, const TrainConfig& cfg, Index grid_h,
                   Index grid_w) {
  auto loss = rel_l2_loss(pred, truth);
  if (cfg.loss == LossKind::RelL2PlusGdl) {
    if (grid_h < 2 || grid_w < 2) throw ContractError("gdl loss requires a 2-D grid");
    loss = add(loss, scale(gdl_loss(pred, truth, grid_h, grid_w), cfg.gdl_weight));
  }
  return loss;
}

// -------------------------------------------------------------------------
// Optimizer and schedule
// -------------------------------------------------------------------------

template <class S>
struct AdamWState {
  std::vector<Tensor<S>> m, v;
  std::int64_t step = 0;
};

template <class S>
AdamWState<S> make_opt_state(const LamoModel<S>& model) {
  AdamWState<S> st;
  for (const auto& [name, p] : model.params()) {
    st.m.emplace_back(p->value.shape);
    st.v.emplace_back(p->value.shape);
  }
  return st;
}

/// Global-norm gradient clip; returns the pre-clip norm.
template <class S>
double clip_global_norm(const std::vector<std::pair<std::string, Var<S>>>& params, double max_norm) {
  double sq = 0;
  for (const auto& [name, p] : params) {
    if (!p->grad.size()) continue;
    for (Index i = 0; i < p->grad.size(); ++i) sq += double(p->grad[i]) * double(p->grad[i]);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const S s = static_cast<S>(max_norm / norm);
    for (const auto& [name, p] : params)
      if (p->grad.size()) arr_view(p->grad) *= s;
  }
  return norm;
}

/// Decoupled AdamW: p -= lr * mhat / (sqrt(vhat) + eps) + lr * wd * p.
template <class S>
void adamw_step(const std::vector<std::pair<std::string, Var<S>>>& params, AdamWState<S>& st, double lr,
                double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  ++st.step;
  const double bc1 = 1.0 - std::pow(beta1, double(st.step));
  const double bc2 = 1.0 - std::pow(beta2, double(st.step));
  for (std::size_t idx = 0; idx < params.size(); ++idx) {
    auto& p = params[idx].second;
    Tensor<S>& m = st.m[idx];
    Tensor<S>& v = st.v[idx];
    const bool has_grad = p->grad.size() == p->value.size();
    for (Index i = 0; i < p->value.size(); ++i) {
      const double g = has_grad ? double(p->grad[i]) : 0.0;
      m[i] = static_cast<S>(beta1 * m[i] + (1.0 - beta1) * g);
      v[i] = static_cast<S>(beta2 * v[i] + (1.0 - beta2) * g * g);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p->value[i] = static_cast<S>(p->value[i] - lr * mhat / (std::sqrt(vhat) + eps) -
                                   lr * weight_decay * p->value[i]);
    }
  }
}

/// Cosine warmup from max_lr/div_factor to max_lr over pct_start of the run,
/// cosine anneal to max_lr/final_div at the end. Continuous in step.
inline double onecycle_lr(std::int64_t step, std::int64_t total, const TrainConfig& cfg) {
  if (step < 0 || step > total) throw ContractError("onecycle_lr: step outside [0, total]");
  const double lr0 = cfg.max_lr / cfg.div_factor;
  const double lrf = cfg.max_lr / cfg.final_div;
  const double split = cfg.pct_start * double(total);
  if (double(step) <= split) {
    const double t = split > 0 ? double(step) / split : 1.0;
    return lr0 + (cfg.max_lr - lr0) * 0.5 * (1.0 - std::cos(M_PI * t));
  }
  const double t = (double(step) - split) / (double(total) - split);
  return lrf + (cfg.max_lr - lrf) * 0.5 * (1.0 + std::cos(M_PI * t));
}

// -------------------------------------------------------------------------
// Training loop and evaluation
// -------------------------------------------------------------------------

struct EpochRow {
  int epoch;
  std::int64_t step;
  double lr;
  double train_loss;
  double test_rel_l2;
};

struct TrainReport {
  std::vector<EpochRow> rows;
  std::string metrics_csv;
  double best_test_rel_l2 = 0;
  int best_epoch = -1;
  Index param_count = 0;
};

namespace train_detail {

inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace train_detail

template <class S>
struct EvalResult {
  double mean_rel_l2 = 0;
  std::vector<double> per_sample;
};

/// De-normalized predictions against raw targets; no parameter mutation.
template <class S>
EvalResult<S> evaluate(const LamoModel<S>& model, const Dataset<S>& raw) {
  Dataset<S> norm = normalize(raw);
  EvalResult<S> res;
  res.per_sample.reserve(static_cast<std::size_t>(raw.n()));
  for (Index i = 0; i < raw.n(); ++i) {
    auto pred = model.forward(norm.input_sample(i), norm.coords)->value;
    auto denorm = denormalize(pred, raw.out_mean, raw.out_std);
    res.per_sample.push_back(rel_l2_metric(denorm, raw.target_sample(i)));
  }
  for (double e : res.per_sample) res.mean_rel_l2 += e;
  if (!res.per_sample.empty()) res.mean_rel_l2 /= double(res.per_sample.size());
  return res;
}

/// Seeded mini-batch training: forward -> loss -> backward -> clip -> AdamW
/// -> OneCycle, one epoch row per epoch, best checkpoint retained.
template <class S>
TrainReport train(LamoModel<S>& model, const Dataset<S>& train_raw, const Dataset<S>& test_raw,
                  const TrainConfig& cfg, const std::string& out_dir = "") {
  cfg.validate();
  Dataset<S> tr = normalize(train_raw);
  const Index n = tr.n();
  const Index steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = std::int64_t(cfg.epochs) * steps_per_epoch;

  TrainReport report;
  report.param_count = model.param_count();
  AdamWState<S> opt = make_opt_state(model);
  std::ostringstream csv;
  csv << "epoch,step,lr,train_loss,test_rel_l2\n";

  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  std::int64_t step = 0;
  double best = std::numeric_limits<double>::infinity();
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch));
    shuffle(order, shuffle_rng);
    double epoch_loss = 0;
    double last_lr = 0;
    for (Index b = 0; b < steps_per_epoch; ++b) {
      const Index lo = b * cfg.batch_size;
      const Index hi = std::min<Index>(n, lo + cfg.batch_size);
      const double inv_batch = 1.0 / double(hi - lo);
      model.zero_grads();
      double batch_loss = 0;
      for (Index s = lo; s < hi; ++s) {
        const Index i = order[static_cast<std::size_t>(s)];
        auto pred = model.forward(tr.input_sample(i), tr.coords);
        auto loss = sample_loss(pred, tr.target_sample(i), cfg, tr.grid_h, tr.grid_w);
        batch_loss += static_cast<double>(loss->value.item());
        backward(scale(loss, inv_batch));
      }
      batch_loss *= inv_batch;
      const double lr = onecycle_lr(step, total_steps, cfg);
      last_lr = lr;
      if (!std::isfinite(batch_loss))
        throw NumericError("train: non-finite loss at step " + std::to_string(step) + " (epoch " +
                           std::to_string(epoch) + ", lr " + std::to_string(lr) + ")");
      clip_global_norm(model.params(), cfg.grad_clip);
      adamw_step(model.params(), opt, lr, cfg.weight_decay);
      ++step;
      epoch_loss += batch_loss;
      if (cfg.log_steps)
        csv << epoch << "," << step << "," << train_detail::fmt_g(lr) << ","
            << train_detail::fmt_g(batch_loss) << ",\n";
    }
    epoch_loss /= double(steps_per_epoch);
    const double test_err = evaluate(model, test_raw).mean_rel_l2;
    report.rows.push_back({epoch, step, last_lr, epoch_loss, test_err});
    csv << epoch << "," << step << "," << train_detail::fmt_g(last_lr) << ","
        << train_detail::fmt_g(epoch_loss) << "," << train_detail::fmt_g(test_err) << "\n";
    if (test_err < best) {
      best = test_err;
      report.best_epoch = epoch;
      if (!out_dir.empty()) save_model(out_dir + "/best.ckpt", model);
    }
    if (!out_dir.empty() && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)
      save_model(out_dir + "/last.ckpt", model);
  }
  report.best_test_rel_l2 = best;
  report.metrics_csv = csv.str();
  if (!out_dir.empty()) {
    save_model(out_dir + "/last.ckpt", model);
    std::ofstream f(out_dir + "/metrics.csv", std::ios::trunc);
    if (!f) throw IoError("cannot write metrics under '" + out_dir + "'");
    f << report.metrics_csv;
  }
  return report;
}

/// Pointwise ridge-regression baseline: one linear map from per-point
/// features [inputs, coords, 1] to targets, fit on every training point,
/// scored like evaluate().
template <class S>
double pointwise_ridge_rel_l2(const Dataset<S>& train_raw, const Dataset<S>& test_raw, double lambda = 1e-6) {
  const Index d = train_raw.in_channels() + train_raw.coord_channels() + 1;
  const Index du = train_raw.out_channels();
  Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(d, d);
  Eigen::MatrixXd xty = Eigen::MatrixXd::Zero(d, du);
  Eigen::VectorXd feat(d);
  for (Index i = 0; i < train_raw.n(); ++i)
    for (Index j = 0; j < train_raw.points(); ++j) {
      for (Index c = 0; c < train_raw.in_channels(); ++c)
        feat(c) = train_raw.inputs[(i * train_raw.points() + j) * train_raw.in_channels() + c];
      for (Index c = 0; c < train_raw.coord_channels(); ++c)
        feat(train_raw.in_channels() + c) = train_raw.coords(j, c);
      feat(d - 1) = 1.0;
      xtx.noalias() += feat * feat.transpose();
      for (Index c = 0; c < du; ++c)
        xty.col(c) += feat * double(train_raw.targets[(i * train_raw.points() + j) * du + c]);
    }
  xtx.diagonal().array() += lambda;
  Eigen::MatrixXd wmat = xtx.ldlt().solve(xty);

  double acc = 0;
  for (Index i = 0; i < test_raw.n(); ++i) {
    Tensor<S> pred(Shape{test_raw.points(), du});
    for (Index j = 0; j < test_raw.points(); ++j) {
      for (Index c = 0; c < test_raw.in_channels(); ++c)
        feat(c) = test_raw.inputs[(i * test_raw.points() + j) * test_raw.in_channels() + c];
      for (Index c = 0; c < test_raw.coord_channels(); ++c)
        feat(test_raw.in_channels() + c) = test_raw.coords(j, c);
      feat(d - 1) = 1.0;
      for (Index c = 0; c < du; ++c) pred(j, c) = static_cast<S>(feat.dot(wmat.col(c)));
    }
    acc += rel_l2_metric(pred, test_raw.target_sample(i));
  }
  return acc / double(test_raw.n());
}

}  // namespace lamo

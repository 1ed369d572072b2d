// Copyright (c) 2026 The cdf-speech Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "cdf/reconstruct.h"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "cdf/io.h"

namespace cdf {
namespace recon {

namespace {

nn::NetworkSpec generator_spec(int input_dim, int spectrum_dim) {
  nn::NetworkSpec spec;
  spec.input_dim = input_dim;
  int d = input_dim;
  for (int i = 0; i < 5; ++i) {
    spec.layers.push_back(nn::LayerSpec::FullyConnected(d, 1024));
    spec.layers.push_back(nn::LayerSpec::ReLU(1024));
    d = 1024;
  }
  spec.layers.push_back(nn::LayerSpec::FullyConnected(1024, spectrum_dim));
  spec.validate();
  return spec;
}

}  // namespace

ReconModel build_recon_model(int phone_classes, int spectrum_dim, Rng* rng) {
  if (phone_classes < 1 || spectrum_dim < 1)
    throw Error("recon model needs positive dims");
  const int window = 2 * kFactorSpliceContext + 1;
  ReconModel model;
  model.phone_dim = phone_classes;
  model.spectrum_dim = spectrum_dim;
  model.spec_q = generator_spec(window * phone_classes, spectrum_dim);
  model.spec_s = generator_spec(window * 40, spectrum_dim);
  model.spec_e = generator_spec(window * 40, spectrum_dim);
  Rng rq = rng->split(hash64("recon.q"));
  Rng rs = rng->split(hash64("recon.s"));
  Rng re = rng->split(hash64("recon.e"));
  model.params_q = nn::init_params<float>(model.spec_q, &rq);
  model.params_s = nn::init_params<float>(model.spec_s, &rs);
  model.params_e = nn::init_params<float>(model.spec_e, &re);
  return model;
}

void reconstruct_rows(const ReconModel& model, const Matrix<float>& q_ctx,
                      const Matrix<float>& s_ctx, const Matrix<float>& e_ctx,
                      Matrix<float>* sum, Matrix<float>* comp_q,
                      Matrix<float>* comp_s, Matrix<float>* comp_e) {
  CDF_CHECK(q_ctx.rows() == s_ctx.rows() && s_ctx.rows() == e_ctx.rows(),
            "factor context row mismatch");
  nn::ForwardTrace<float> tq, ts, te;
  nn::network_forward(model.spec_q, model.params_q, q_ctx, {}, &tq);
  nn::network_forward(model.spec_s, model.params_s, s_ctx, {}, &ts);
  nn::network_forward(model.spec_e, model.params_e, e_ctx, {}, &te);
  *sum = tq.output();
  // Left-associated (f + g) + h, so component sums reproduce bit-exact.
  for (size_t i = 0; i < sum->size(); ++i)
    sum->data()[i] =
        (sum->data()[i] + ts.output().data()[i]) + te.output().data()[i];
  if (comp_q) *comp_q = tq.output();
  if (comp_s) *comp_s = ts.output();
  if (comp_e) *comp_e = te.output();
}

FrameComponents reconstruct_frame(const ReconModel& model,
                                  std::span<const float> q_ctx,
                                  std::span<const float> s_ctx,
                                  std::span<const float> e_ctx) {
  auto as_matrix = [](std::span<const float> v) {
    Matrix<float> m(1, static_cast<int>(v.size()));
    std::copy(v.begin(), v.end(), m.data());
    return m;
  };
  Matrix<float> sum, cq, cs, ce;
  reconstruct_rows(model, as_matrix(q_ctx), as_matrix(s_ctx), as_matrix(e_ctx),
                   &sum, &cq, &cs, &ce);
  FrameComponents out;
  out.sum.assign(sum.data(), sum.data() + sum.size());
  out.linguistic.assign(cq.data(), cq.data() + cq.size());
  out.speaker.assign(cs.data(), cs.data() + cs.size());
  out.emotion.assign(ce.data(), ce.data() + ce.size());
  return out;
}

namespace {

struct EvalStats {
  double mse = 0.0;
  double residual_mean = 0.0;
  double residual_variance = 0.0;
};

EvalStats evaluate(const ReconModel& model, const ReconDataset& data,
                   const std::vector<int>& utt_indices, int64_t frame_cap) {
  double sum_sq = 0.0, sum_res = 0.0;
  int64_t count = 0;
  int64_t frames = 0;
  Matrix<float> pred;
  for (int ui : utt_indices) {
    const ReconUtt& u = data.utts[ui];
    Matrix<float> q_ctx = gather_context(u.q, kFactorSpliceContext,
                                         kFactorSpliceContext);
    Matrix<float> s_ctx = gather_context(u.s, kFactorSpliceContext,
                                         kFactorSpliceContext);
    Matrix<float> e_ctx = gather_context(u.e, kFactorSpliceContext,
                                         kFactorSpliceContext);
    reconstruct_rows(model, q_ctx, s_ctx, e_ctx, &pred);
    for (size_t i = 0; i < pred.size(); ++i) {
      const double r = static_cast<double>(pred.data()[i]) -
                       static_cast<double>(u.target.data()[i]);
      sum_sq += r * r;
      sum_res += r;
      ++count;
    }
    frames += u.target.rows();
    if (frame_cap > 0 && frames >= frame_cap) break;
  }
  EvalStats out;
  if (count > 0) {
    out.mse = sum_sq / count;
    out.residual_mean = sum_res / count;
    out.residual_variance =
        sum_sq / count - out.residual_mean * out.residual_mean;
  }
  return out;
}

}  // namespace

ReconReport train_recon(ReconModel* model, const ReconDataset& data,
                        const nn::TrainConfig& cfg, nn::TrainLog* log) {
  CDF_CHECK(!data.train.empty(), "recon training set is empty");
  const int ctx = kFactorSpliceContext;

  // Global (utterance, frame) pool over the training split.
  std::vector<std::pair<int, int>> pool;
  for (int ui : data.train)
    for (int t = 0; t < data.utts[ui].target.rows(); ++t)
      pool.emplace_back(ui, t);

  nn::ParamStore<float> grad_q = nn::zero_params<float>(model->spec_q);
  nn::ParamStore<float> grad_s = nn::zero_params<float>(model->spec_s);
  nn::ParamStore<float> grad_e = nn::zero_params<float>(model->spec_e);
  nn::ParamStore<float> vel_q = nn::zero_params<float>(model->spec_q);
  nn::ParamStore<float> vel_s = nn::zero_params<float>(model->spec_s);
  nn::ParamStore<float> vel_e = nn::zero_params<float>(model->spec_e);
  auto clear = [](nn::ParamStore<float>* g) {
    for (auto& e : g->layers) {
      e.w.fill(0.0f);
      std::fill(e.b.begin(), e.b.end(), 0.0f);
    }
  };

  const int qd = model->phone_dim, fd = 40, sd = model->spectrum_dim;
  const int window = 2 * ctx + 1;
  double lr = cfg.learning_rate;
  double best_val = 1e300;
  int consecutive_rises = 0;
  Rng run_rng(cfg.seed);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng epoch_rng = run_rng.split(1000 + static_cast<uint64_t>(epoch));
    std::vector<std::pair<int, int>> order = pool;
    epoch_rng.shuffle(order);
    int64_t take = static_cast<int64_t>(order.size());
    if (cfg.frames_per_epoch > 0)
      take = std::min(take, cfg.frames_per_epoch);

    double train_loss = 0.0;
    int64_t trained = 0;
    for (int64_t pos = 0; pos < take; pos += cfg.minibatch_size) {
      const int b =
          static_cast<int>(std::min<int64_t>(cfg.minibatch_size, take - pos));
      Matrix<float> q_ctx(b, window * qd), s_ctx(b, window * fd),
          e_ctx(b, window * fd), target(b, sd);
      for (int i = 0; i < b; ++i) {
        const auto [ui, t] = order[pos + i];
        const ReconUtt& u = data.utts[ui];
        gather_context_row(u.q, t, ctx, ctx, q_ctx.row(i));
        gather_context_row(u.s, t, ctx, ctx, s_ctx.row(i));
        gather_context_row(u.e, t, ctx, ctx, e_ctx.row(i));
        std::copy(u.target.row(t), u.target.row(t) + sd, target.row(i));
      }
      nn::ForwardTrace<float> tq, ts, te;
      nn::network_forward(model->spec_q, model->params_q, q_ctx, {}, &tq);
      nn::network_forward(model->spec_s, model->params_s, s_ctx, {}, &ts);
      nn::network_forward(model->spec_e, model->params_e, e_ctx, {}, &te);
      Matrix<float> sum = tq.output();
      for (size_t i = 0; i < sum.size(); ++i)
        sum.data()[i] =
            (sum.data()[i] + ts.output().data()[i]) + te.output().data()[i];
      auto [loss, grad] = nn::mse_loss(sum, target);
      // The composition is elementwise addition, so each generator sees
      // the same output gradient.
      clear(&grad_q);
      clear(&grad_s);
      clear(&grad_e);
      nn::network_backward(model->spec_q, model->params_q, tq, grad, false,
                           &grad_q);
      nn::network_backward(model->spec_s, model->params_s, ts, grad, false,
                           &grad_s);
      nn::network_backward(model->spec_e, model->params_e, te, grad, false,
                           &grad_e);
      nn::sgd_step(&model->params_q, grad_q, &vel_q, lr, cfg.momentum);
      nn::sgd_step(&model->params_s, grad_s, &vel_s, lr, cfg.momentum);
      nn::sgd_step(&model->params_e, grad_e, &vel_e, lr, cfg.momentum);
      train_loss += static_cast<double>(loss) * b;
      trained += b;
    }
    train_loss /= std::max<int64_t>(trained, 1);

    const EvalStats val =
        evaluate(*model, data, data.val.empty() ? data.train : data.val,
                 10000);
    nn::EpochLog el;
    el.epoch = epoch;
    el.train_loss = train_loss;
    el.val_loss = val.mse;
    el.frame_accuracy = 0.0;  // not a classifier
    el.learning_rate = lr;
    log->epochs.push_back(el);
    log_info(strprintf("recon epoch %d: train mse %.6f, val mse %.6f, lr %g",
                       epoch, train_loss, val.mse, lr));

    if (epoch > 0) {
      if (val.mse > log->epochs[epoch - 1].val_loss)
        ++consecutive_rises;
      else
        consecutive_rises = 0;
      if (consecutive_rises >= 3) {
        log_info("recon early stop: validation loss rose 3 epochs in a row");
        break;
      }
    }
    if (val.mse > best_val - cfg.lr_halving_threshold && lr > 1e-6)
      lr *= 0.5;
    best_val = std::min(best_val, val.mse);
  }
  if (!log->epochs.empty() &&
      log->epochs.back().val_loss > log->epochs.front().val_loss) {
    log->final_worse_than_first = true;
    log_warn("recon: final validation loss above first epoch");
  }

  ReconReport report;
  const EvalStats train_stats = evaluate(*model, data, data.train, 20000);
  const EvalStats val_stats =
      evaluate(*model, data, data.val.empty() ? data.train : data.val, 0);
  report.train_mse = train_stats.mse;
  report.heldout_mse = val_stats.mse;
  report.residual_mean = val_stats.residual_mean;
  report.residual_variance = val_stats.residual_variance;
  return report;
}

void save_recon_model(const ReconModel& model,
                      const std::filesystem::path& path) {
  std::ofstream os = open_out(path);
  nn::save_model(os, model.spec_q, model.params_q);
  nn::save_model(os, model.spec_s, model.params_s);
  nn::save_model(os, model.spec_e, model.params_e);
  if (!os) throw Error("failed writing recon model: " + path.string());
}

ReconModel load_recon_model(const std::filesystem::path& path) {
  std::ifstream is = open_in(path);
  ReconModel model;
  std::tie(model.spec_q, model.params_q) = nn::load_model(is);
  std::tie(model.spec_s, model.params_s) = nn::load_model(is);
  std::tie(model.spec_e, model.params_e) = nn::load_model(is);
  model.spectrum_dim = model.spec_q.output_dim();
  model.phone_dim = model.spec_q.input_dim / (2 * kFactorSpliceContext + 1);
  if (model.spec_s.output_dim() != model.spectrum_dim ||
      model.spec_e.output_dim() != model.spectrum_dim)
    throw Error("recon generators disagree on spectrum dim");
  return model;
}

void write_recon_report_csv(const ReconReport& report,
                            const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot write " + path.string());
  os << "metric,value\n";
  os << strprintf("train_mse,%.9g\n", report.train_mse);
  os << strprintf("heldout_mse,%.9g\n", report.heldout_mse);
  os << strprintf("residual_mean,%.9g\n", report.residual_mean);
  os << strprintf("residual_variance,%.9g\n", report.residual_variance);
}

void write_pgm(const Matrix<double>& image, const std::filesystem::path& path) {
  double lo = 1e300, hi = -1e300;
  for (size_t i = 0; i < image.size(); ++i) {
    lo = std::min(lo, image.data()[i]);
    hi = std::max(hi, image.data()[i]);
  }
  const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
  std::ofstream os = open_out(path);
  os << "P5\n" << image.cols() << " " << image.rows() << "\n255\n";
  for (int r = 0; r < image.rows(); ++r) {
    for (int c = 0; c < image.cols(); ++c) {
      const int v =
          static_cast<int>(std::lround((image(r, c) - lo) * scale));
      os.put(static_cast<char>(std::clamp(v, 0, 255)));
    }
  }
  if (!os) throw Error("failed writing pgm: " + path.string());
}

namespace {

// T x D feature matrix -> D x T image with bin 0 at the bottom row.
Matrix<double> to_image(const Matrix<float>& feat) {
  Matrix<double> img(feat.cols(), feat.rows());
  for (int t = 0; t < feat.rows(); ++t)
    for (int k = 0; k < feat.cols(); ++k)
      img(feat.cols() - 1 - k, t) = feat(t, k);
  return img;
}

}  // namespace

void render_spectrograms(const Matrix<float>& original,
                         const Matrix<float>& reconstruction,
                         const Matrix<float>& comp_q,
                         const Matrix<float>& comp_s,
                         const Matrix<float>& comp_e,
                         const std::filesystem::path& out_dir,
                         const std::string& utterance_id) {
  std::filesystem::create_directories(out_dir);
  write_pgm(to_image(original), out_dir / (utterance_id + "_original.pgm"));
  write_pgm(to_image(reconstruction), out_dir / (utterance_id + "_recon.pgm"));
  write_pgm(to_image(comp_q), out_dir / (utterance_id + "_ling.pgm"));
  write_pgm(to_image(comp_s), out_dir / (utterance_id + "_spk.pgm"));
  write_pgm(to_image(comp_e), out_dir / (utterance_id + "_emo.pgm"));
}

}  // namespace recon
}  // namespace cdf

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
//
// Log-spectrum reconstruction from the three factor streams: three
// generator networks map spliced factor contexts to per-frame log
// spectra, composed by addition in the log domain and trained jointly
// with MSE against the true log spectrum.

#ifndef CDF_RECONSTRUCT_H_
#define CDF_RECONSTRUCT_H_

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cdf/matrix.h"
#include "cdf/nn.h"
#include "cdf/rng.h"

namespace cdf {
namespace recon {

inline constexpr int kFactorSpliceContext = 4;  // 9-frame factor windows

struct ReconModel {
  nn::NetworkSpec spec_q, spec_s, spec_e;
  nn::ParamStore<float> params_q, params_s, params_e;
  int phone_dim = 0;
  int spectrum_dim = 0;
};

// Generator inputs are 9 * P (linguistic) and 9 * 40 (speaker, emotion);
// each generator is 5 x (FC 1024 + ReLU) with a linear output layer, so
// log spectra may be signed.
ReconModel build_recon_model(int phone_classes, int spectrum_dim, Rng* rng);

struct FrameComponents {
  std::vector<float> sum;         // predicted log spectrum
  std::vector<float> linguistic;  // f(q)
  std::vector<float> speaker;     // g(s)
  std::vector<float> emotion;     // h(e)
};

FrameComponents reconstruct_frame(const ReconModel& model,
                                  std::span<const float> q_ctx,
                                  std::span<const float> s_ctx,
                                  std::span<const float> e_ctx);

// Batched form over spliced context rows; component outputs optional.
void reconstruct_rows(const ReconModel& model, const Matrix<float>& q_ctx,
                      const Matrix<float>& s_ctx, const Matrix<float>& e_ctx,
                      Matrix<float>* sum, Matrix<float>* comp_q = nullptr,
                      Matrix<float>* comp_s = nullptr,
                      Matrix<float>* comp_e = nullptr);

struct ReconUtt {
  Matrix<float> q, s, e;  // unspliced factor streams, frame-aligned
  Matrix<float> target;   // T x spectrum_dim log spectrum
};

struct ReconDataset {
  std::vector<ReconUtt> utts;
  std::vector<int> train, val;  // utterance indices
};

struct ReconReport {
  double train_mse = 0.0;
  double heldout_mse = 0.0;
  double residual_mean = 0.0;
  double residual_variance = 0.0;
};

// Joint gradient descent through the log-domain addition into all three
// generators. Held-out numbers are computed over the full validation set.
ReconReport train_recon(ReconModel* model, const ReconDataset& data,
                        const nn::TrainConfig& cfg, nn::TrainLog* log);

// model.cdfn holds the three generator records back to back.
void save_recon_model(const ReconModel& model,
                      const std::filesystem::path& path);
ReconModel load_recon_model(const std::filesystem::path& path);

void write_recon_report_csv(const ReconReport& report,
                            const std::filesystem::path& path);

// Binary P5 grayscale, linear min-max scaling to 0..255 per image.
void write_pgm(const Matrix<double>& image, const std::filesystem::path& path);

// Emits the five panels (original, reconstruction, three components);
// image rows are frequency bins, columns frames.
void render_spectrograms(const Matrix<float>& original,
                         const Matrix<float>& reconstruction,
                         const Matrix<float>& comp_q,
                         const Matrix<float>& comp_s,
                         const Matrix<float>& comp_e,
                         const std::filesystem::path& out_dir,
                         const std::string& utterance_id);

}  // namespace recon
}  // namespace cdf

#endif  // CDF_RECONSTRUCT_H_

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
// cdf: corpus generation, cascade training, factor extraction,
// evaluation, reconstruction and projection from one config file.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cdf/cascade.h"
#include "cdf/config.h"
#include "cdf/dsp.h"
#include "cdf/eval.h"
#include "cdf/io.h"
#include "cdf/reconstruct.h"
#include "cdf/synthcorpus.h"

namespace cdf {
namespace {

namespace fs = std::filesystem;

synth::CorpusManifest require_manifest(const cli::RunConfig& cfg) {
  if (!fs::exists(cfg.manifest_path()))
    throw UsageError("corpus manifest not found at " +
                     cfg.manifest_path().string() +
                     "; run `cdf gen-corpus` first");
  return synth::load_manifest(cfg.manifest_path());
}

cascade::StagePlan make_plan(const cli::RunConfig& cfg,
                             const synth::CorpusManifest& manifest,
                             const std::string& stage) {
  cascade::StagePlan plan;
  plan.stage = cascade::stage_by_name(stage);
  plan.corpus = &manifest;
  plan.train_cfg = cfg.stage_cfg(stage);
  plan.cache_dir = cfg.cache_dir();
  plan.speaker_factor_source = cfg.speaker_factor_source;
  plan.emotion_factor_source = cfg.emotion_factor_source;
  plan.threads = cfg.threads;
  return plan;
}

void cmd_gen_corpus(const cli::RunConfig& cfg) {
  const auto manifest =
      synth::gen_corpus(cfg.corpus, cfg.corpus_dir(), cfg.threads);
  log_info(strprintf("generated %zu utterances under %s",
                     manifest.utts.size(), cfg.corpus_dir().c_str()));
}

void cmd_featurize(const cli::RunConfig& cfg, const std::string& wav_dir) {
  if (!fs::is_directory(wav_dir))
    throw UsageError("not a directory: " + wav_dir);
  std::vector<fs::path> wavs;
  for (const auto& entry : fs::directory_iterator(wav_dir))
    if (entry.path().extension() == ".wav") wavs.push_back(entry.path());
  std::sort(wavs.begin(), wavs.end());
  if (wavs.empty()) throw UsageError("no .wav files in " + wav_dir);
  const fs::path out_dir = cfg.work_dir / "feats_real";
  fs::create_directories(out_dir);
  for (const auto& wav : wavs) {
    const dsp::AudioBuffer audio = dsp::read_wav(wav);
    if (audio.sample_rate != cfg.corpus.sample_rate)
      throw UsageError(strprintf("%s has sample rate %d, expected %d",
                                 wav.c_str(), audio.sample_rate,
                                 cfg.corpus.sample_rate));
    const std::string stem = wav.stem().string();
    dsp::save_feature(dsp::log_fbank(audio, cfg.frame),
                      out_dir / (stem + ".fbank.cdfm"));
    dsp::save_feature(dsp::log_spectrum(audio, cfg.frame),
                      out_dir / (stem + ".spec.cdfm"));
  }
  log_info(strprintf("featurized %zu wav files into %s", wavs.size(),
                     out_dir.c_str()));
}

void cmd_train(const cli::RunConfig& cfg, const std::string& stage) {
  const auto manifest = require_manifest(cfg);
  cascade::train_stage(make_plan(cfg, manifest, stage));
}

void cmd_extract(const cli::RunConfig& cfg, const std::string& stage) {
  const auto manifest = require_manifest(cfg);
  cascade::extract_stage(make_plan(cfg, manifest, stage));
}

std::vector<models::FactorStream> load_all_factors(
    const cli::RunConfig& cfg, const synth::CorpusManifest& manifest,
    const std::string& stage, models::FactorKind kind) {
  cascade::require_factor_cache(cfg.cache_dir(), stage, manifest);
  std::vector<models::FactorStream> out;
  out.reserve(manifest.utts.size());
  for (const auto& utt : manifest.utts)
    out.push_back(
        cascade::load_factors(cfg.cache_dir(), stage, utt.id, kind));
  return out;
}

void cmd_eval_sid(const cli::RunConfig& cfg) {
  const auto manifest = require_manifest(cfg);
  fs::create_directories(cfg.report_dir());
  const fs::path out = cfg.report_dir() / "sid_report.csv";
  std::ofstream os(out, std::ios::trunc);
  if (!os) throw Error("cannot write " + out.string());
  os << "system,condition,enroll_seconds,test_frames,trials,correct,idr\n";
  for (const std::string system : {"spk-idf", "spk-cdf"}) {
    cascade::require_stage_model(cfg.cache_dir(), system);
    const auto factors = load_all_factors(cfg, manifest, system,
                                          models::FactorKind::kSpeaker);
    const auto results = eval::run_sid_eval(
        manifest, factors, cfg.eval.conditions, cfg.seed,
        cfg.eval.max_segments_per_speaker, cfg.corpus.frame_shift_ms);
    for (const auto& r : results) {
      os << strprintf("%s,%s,%g,%d,%lld,%lld,%.9g\n", system.c_str(),
                      r.cond.label().c_str(), r.cond.enroll_seconds,
                      r.cond.test_frames, static_cast<long long>(r.trials),
                      static_cast<long long>(r.correct), r.idr);
      log_info(strprintf("%s %s: IDR %.4f (%lld/%lld)", system.c_str(),
                         r.cond.label().c_str(), r.idr,
                         static_cast<long long>(r.correct),
                         static_cast<long long>(r.trials)));
    }
  }
  log_info("wrote " + out.string());
}

struct AerNumbers {
  double frame_acc, frame_map, utt_acc, utt_map;
};

AerNumbers eval_emotion_stage(const cli::RunConfig& cfg,
                              const synth::CorpusManifest& manifest,
                              const cascade::FeatureStats& stats,
                              const std::string& stage,
                              std::span<const int> utt_indices) {
  const auto plan = make_plan(cfg, manifest, stage);
  auto [spec, params] =
      nn::load_model(cascade::model_path(cfg.cache_dir(), stage));
  const nn::NetworkSpec expected = cascade::stage_spec(plan.stage, manifest);
  if (!spec.same_topology(expected))
    throw Error("cached model for stage '" + stage +
                "' does not match the configured architecture");

  std::vector<int> frame_truth, frame_hyp, utt_truth, utt_hyp;
  nn::ForwardTrace<float> trace;
  for (int ui : utt_indices) {
    const auto& rec = manifest.utts[ui];
    Matrix<float> feats = cascade::prepare_fbank(
        dsp::load_feature(manifest.fbank_path(ui)), stats);
    Matrix<float> x = gather_context(feats, models::kEmotionSpliceContext,
                                     models::kEmotionSpliceContext);
    std::vector<models::FactorStream> cond;
    std::vector<const Matrix<float>*> sides;
    if (plan.stage.condition_on_linguistic)
      cond.push_back(cascade::load_factors(cfg.cache_dir(), "ling", rec.id,
                                           models::FactorKind::kLinguistic));
    if (plan.stage.condition_on_speaker)
      cond.push_back(cascade::load_factors(cfg.cache_dir(),
                                           cfg.speaker_factor_source, rec.id,
                                           models::FactorKind::kSpeaker));
    for (auto& c : cond) {
      for (size_t k = 0; k < c.data.size(); ++k)
        c.data.data()[k] *= models::kConditioningScale;
      sides.push_back(&c.data);
    }
    nn::network_forward(spec, params, x, nn::side_span(sides), &trace);
    const Matrix<float>& probs = trace.output();
    for (int t = 0; t < probs.rows(); ++t) {
      const float* row = probs.row(t);
      int best = 0;
      for (int j = 1; j < probs.cols(); ++j)
        if (row[j] > row[best]) best = j;
      frame_truth.push_back(rec.emotion);
      frame_hyp.push_back(best);
    }
    utt_truth.push_back(rec.emotion);
    utt_hyp.push_back(eval::utterance_emotion(probs));
  }
  const int k = manifest.num_emotions();
  const auto frame_cm = eval::confusion(frame_truth, frame_hyp, k);
  const auto utt_cm = eval::confusion(utt_truth, utt_hyp, k);
  return {eval::acc(frame_cm), eval::map(frame_cm), eval::acc(utt_cm),
          eval::map(utt_cm)};
}

void cmd_eval_aer(const cli::RunConfig& cfg) {
  const auto manifest = require_manifest(cfg);
  const cascade::Split split = cascade::split_utterances(manifest, cfg.seed);
  const cascade::FeatureStats stats = cascade::compute_feature_stats(manifest);
  fs::create_directories(cfg.report_dir());
  const fs::path out = cfg.report_dir() / "aer_report.csv";
  std::ofstream os(out, std::ios::trunc);
  if (!os) throw Error("cannot write " + out.string());
  os << "config,split,level,metric,value\n";

  int evaluated = 0;
  for (const std::string stage :
       {"emo-baseline", "emo-ling", "emo-spk", "emo-ling-spk"}) {
    if (!fs::exists(cascade::model_path(cfg.cache_dir(), stage))) {
      log_info("skipping untrained emotion configuration '" + stage + "'");
      continue;
    }
    ++evaluated;
    for (const auto& [split_name, indices] :
         {std::pair<std::string, const std::vector<int>*>{"train",
                                                          &split.train},
          {"heldout", &split.val}}) {
      const AerNumbers nums =
          eval_emotion_stage(cfg, manifest, stats, stage, *indices);
      os << strprintf("%s,%s,frame,acc,%.9g\n", stage.c_str(),
                      split_name.c_str(), nums.frame_acc);
      os << strprintf("%s,%s,frame,map,%.9g\n", stage.c_str(),
                      split_name.c_str(), nums.frame_map);
      os << strprintf("%s,%s,utterance,acc,%.9g\n", stage.c_str(),
                      split_name.c_str(), nums.utt_acc);
      os << strprintf("%s,%s,utterance,map,%.9g\n", stage.c_str(),
                      split_name.c_str(), nums.utt_map);
      log_info(strprintf("%s (%s): frame acc %.4f map %.4f, utt acc %.4f "
                         "map %.4f",
                         stage.c_str(), split_name.c_str(), nums.frame_acc,
                         nums.frame_map, nums.utt_acc, nums.utt_map));
    }
  }
  if (evaluated == 0)
    throw UsageError(
        "no trained emotion configuration found; run `cdf train "
        "emo-baseline` (etc.) first");
  log_info("wrote " + out.string());
}

void cmd_reconstruct(const cli::RunConfig& cfg, std::string utt_id) {
  const auto manifest = require_manifest(cfg);
  cascade::require_stage_model(cfg.cache_dir(), "recon");
  if (utt_id.empty()) utt_id = cfg.recon.render_utterance;
  if (utt_id.empty()) {
    const cascade::Split split = cascade::split_utterances(manifest, cfg.seed);
    const int ui = split.val.empty() ? split.train.front() : split.val.front();
    utt_id = manifest.utts[ui].id;
  }
  const int ui = manifest.find_utt(utt_id);
  if (ui < 0) throw UsageError("unknown utterance id: " + utt_id);

  const recon::ReconModel model =
      recon::load_recon_model(cascade::model_path(cfg.cache_dir(), "recon"));
  const Matrix<float> q =
      cascade::load_factors(cfg.cache_dir(), "ling", utt_id,
                            models::FactorKind::kLinguistic)
          .data;
  const Matrix<float> s =
      cascade::load_factors(cfg.cache_dir(), cfg.speaker_factor_source,
                            utt_id, models::FactorKind::kSpeaker)
          .data;
  const Matrix<float> e =
      cascade::load_factors(cfg.cache_dir(), cfg.emotion_factor_source,
                            utt_id, models::FactorKind::kEmotion)
          .data;
  const Matrix<float> target =
      convert_matrix<float>(dsp::load_feature(manifest.spec_path(ui)).data);

  const int ctx = recon::kFactorSpliceContext;
  Matrix<float> sum, cq, cs, ce;
  recon::reconstruct_rows(model, gather_context(q, ctx, ctx),
                          gather_context(s, ctx, ctx),
                          gather_context(e, ctx, ctx), &sum, &cq, &cs, &ce);
  auto [mse, grad] = nn::mse_loss(sum, target);
  (void)grad;

  fs::create_directories(cfg.report_dir());
  recon::render_spectrograms(target, sum, cq, cs, ce, cfg.report_dir(),
                             utt_id);
  const fs::path out = cfg.report_dir() / ("recon_" + utt_id + ".csv");
  std::ofstream os(out, std::ios::trunc);
  if (!os) throw Error("cannot write " + out.string());
  os << "metric,value\n";
  os << strprintf("frame_mse,%.9g\n", static_cast<double>(mse));
  os << strprintf("frames,%d\n", target.rows());
  log_info(strprintf("reconstructed %s: frame MSE %.6f; panels under %s",
                     utt_id.c_str(), static_cast<double>(mse),
                     cfg.report_dir().c_str()));
}

void cmd_project(const cli::RunConfig& cfg, const std::string& stage) {
  const auto manifest = require_manifest(cfg);
  const cascade::StageDef def = cascade::stage_by_name(stage);
  if (def.kind == cascade::StageKind::kRecon)
    throw UsageError("stage 'recon' has no factors to project");
  models::FactorKind kind;
  switch (def.kind) {
    case cascade::StageKind::kLinguistic:
      kind = models::FactorKind::kLinguistic;
      break;
    case cascade::StageKind::kSpeaker:
      kind = models::FactorKind::kSpeaker;
      break;
    default:
      kind = models::FactorKind::kEmotion;
      break;
  }
  cascade::require_factor_cache(cfg.cache_dir(), stage, manifest);

  // One utterance per speaker, frames strided to keep the plot readable.
  std::vector<int> chosen;
  std::vector<char> seen(manifest.num_speakers(), 0);
  for (size_t i = 0; i < manifest.utts.size(); ++i) {
    if (!seen[manifest.utts[i].speaker]) {
      seen[manifest.utts[i].speaker] = 1;
      chosen.push_back(static_cast<int>(i));
    }
  }
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<std::vector<float>> rows;
  for (int ui : chosen) {
    const auto& rec = manifest.utts[ui];
    const models::FactorStream f =
        cascade::load_factors(cfg.cache_dir(), stage, rec.id, kind);
    std::vector<uint16_t> phones;
    if (kind == models::FactorKind::kLinguistic)
      phones = synth::load_phone_labels(manifest.root / rec.phone_rel,
                                        rec.frames);
    const int stride = std::max(1, f.num_frames() / 250);
    for (int t = 0; t < f.num_frames(); t += stride) {
      ids.push_back(strprintf("%s:%d", rec.id.c_str(), t));
      switch (kind) {
        case models::FactorKind::kLinguistic:
          labels.push_back(phones[t]);
          break;
        case models::FactorKind::kSpeaker:
          labels.push_back(rec.speaker);
          break;
        case models::FactorKind::kEmotion:
          labels.push_back(rec.emotion);
          break;
      }
      rows.emplace_back(f.data.row(t), f.data.row(t) + f.dim());
    }
  }
  Matrix<double> points(static_cast<int>(rows.size()),
                        static_cast<int>(rows[0].size()));
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < rows[i].size(); ++j)
      points(static_cast<int>(i), static_cast<int>(j)) = rows[i][j];
  const Matrix<double> projected = eval::pca_project(points, 2);

  fs::create_directories(cfg.report_dir());
  const fs::path out = cfg.report_dir() / ("projection_" + stage + ".csv");
  std::ofstream os(out, std::ios::trunc);
  if (!os) throw Error("cannot write " + out.string());
  os << "id,label,x,y\n";
  for (int i = 0; i < projected.rows(); ++i)
    os << strprintf("%s,%d,%.9g,%.9g\n", ids[i].c_str(), labels[i],
                    projected(i, 0), projected(i, 1));
  log_info("wrote " + out.string());
}

int run(int argc, char** argv) {
  CLI::App app{"cdf: cascaded speech factorization toolkit"};
  app.require_subcommand(1);
  app.fallthrough();  // global options may follow the subcommand

  std::string config_path;
  uint64_t seed_override = 0;
  bool have_seed = false;
  int threads_override = 0;
  std::string out_override;
  app.add_option("--config", config_path, "experiment config (JSON)")
      ->required();
  app.add_option("--seed", seed_override, "override the run seed")
      ->each([&](const std::string&) { have_seed = true; });
  app.add_option("--threads", threads_override, "cap worker threads");
  app.add_option("--out", out_override, "override the work directory");

  std::string stage, wav_dir, utt_id;
  auto* c_gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus");
  auto* c_feat =
      app.add_subcommand("featurize", "extract features from real wav files");
  c_feat->add_option("wav_dir", wav_dir, "directory of PCM16 mono wavs")
      ->required();
  auto* c_train = app.add_subcommand("train", "train one cascade stage");
  c_train->add_option("stage", stage, "ling|spk-idf|spk-cdf|emo-*|recon")
      ->required();
  auto* c_extract =
      app.add_subcommand("extract", "cache factors for one stage");
  c_extract->add_option("stage", stage, "stage whose factors to cache")
      ->required();
  auto* c_sid = app.add_subcommand("eval-sid", "speaker identification report");
  auto* c_aer = app.add_subcommand("eval-aer", "emotion recognition report");
  auto* c_recon = app.add_subcommand(
      "reconstruct", "reconstruct one utterance and render spectrograms");
  c_recon->add_option("utterance", utt_id, "utterance id (default: config)");
  auto* c_proj =
      app.add_subcommand("project", "2-D PCA projection of cached factors");
  c_proj->add_option("stage", stage, "stage whose factors to project")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    cli::RunConfig cfg = cli::load_config(config_path);
    if (have_seed) {
      cfg.seed = seed_override;
      cfg.corpus.seed = seed_override;
      for (auto& [name, st] : cfg.stages) st.seed = seed_override;
    }
    if (threads_override > 0) cfg.threads = threads_override;
    if (!out_override.empty()) {
      const fs::path p(out_override);
      cfg.work_dir = p.is_absolute() ? p : fs::absolute(p);
    }
    fs::create_directories(cfg.work_dir);

    if (c_gen->parsed()) cmd_gen_corpus(cfg);
    if (c_feat->parsed()) cmd_featurize(cfg, wav_dir);
    if (c_train->parsed()) cmd_train(cfg, stage);
    if (c_extract->parsed()) cmd_extract(cfg, stage);
    if (c_sid->parsed()) cmd_eval_sid(cfg);
    if (c_aer->parsed()) cmd_eval_aer(cfg);
    if (c_recon->parsed()) cmd_reconstruct(cfg, utt_id);
    if (c_proj->parsed()) cmd_project(cfg, stage);
    return 0;
  } catch (const UsageError& e) {
    log_error(e.what());
    return 2;
  } catch (const std::exception& e) {
    log_error(e.what());
    return 1;
  }
}

}  // namespace
}  // namespace cdf

int main(int argc, char** argv) { return cdf::run(argc, argv); }

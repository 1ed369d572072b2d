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

#include "cdf/cascade.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <mutex>
#include <thread>

#include "cdf/io.h"
#include "cdf/reconstruct.h"

namespace cdf {
namespace cascade {

namespace {

const std::vector<std::string> kStageNames = {
    "ling",     "spk-idf",  "spk-cdf",      "emo-baseline",
    "emo-ling", "emo-spk",  "emo-ling-spk", "recon"};

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  std::exception_ptr first_error;
  std::mutex error_mutex;
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += threads) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace

StageDef stage_by_name(const std::string& name) {
  StageDef def;
  def.name = name;
  if (name == "ling") {
    def.kind = StageKind::kLinguistic;
  } else if (name == "spk-idf") {
    def.kind = StageKind::kSpeaker;
  } else if (name == "spk-cdf") {
    def.kind = StageKind::kSpeaker;
    def.condition_on_linguistic = true;
  } else if (name == "emo-baseline") {
    def.kind = StageKind::kEmotion;
  } else if (name == "emo-ling") {
    def.kind = StageKind::kEmotion;
    def.condition_on_linguistic = true;
  } else if (name == "emo-spk") {
    def.kind = StageKind::kEmotion;
    def.condition_on_speaker = true;
  } else if (name == "emo-ling-spk") {
    def.kind = StageKind::kEmotion;
    def.condition_on_linguistic = true;
    def.condition_on_speaker = true;
  } else if (name == "recon") {
    def.kind = StageKind::kRecon;
  } else {
    throw UsageError("unknown stage '" + name +
                     "' (expected one of: ling, spk-idf, spk-cdf, "
                     "emo-baseline, emo-ling, emo-spk, emo-ling-spk, recon)");
  }
  return def;
}

const std::vector<std::string>& all_stage_names() { return kStageNames; }

Split split_utterances(const synth::CorpusManifest& corpus, uint64_t seed) {
  CDF_CHECK(!corpus.utts.empty(), "empty corpus");
  std::vector<int> order(corpus.utts.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  Rng rng = Rng(seed).split(hash64("train-val-split"));
  rng.shuffle(order);
  Split split;
  const size_t n_train =
      std::max<size_t>(1, order.size() - order.size() / 10);
  for (size_t i = 0; i < order.size(); ++i) {
    if (i < n_train)
      split.train.push_back(order[i]);
    else
      split.val.push_back(order[i]);
  }
  return split;
}

FeatureStats compute_feature_stats(const synth::CorpusManifest& corpus) {
  CDF_CHECK(!corpus.utts.empty(), "empty corpus");
  std::vector<double> mean, sq;
  int64_t n = 0;
  for (size_t i = 0; i < corpus.utts.size(); ++i) {
    const dsp::FeatureMatrix f = dsp::load_feature(corpus.fbank_path(i));
    if (mean.empty()) {
      mean.assign(f.dim(), 0.0);
      sq.assign(f.dim(), 0.0);
    }
    CDF_CHECK(f.dim() == static_cast<int>(mean.size()),
              "inconsistent fbank dims across the corpus");
    for (int t = 0; t < f.num_frames(); ++t) {
      const double* row = f.data.row(t);
      for (size_t j = 0; j < mean.size(); ++j) {
        mean[j] += row[j];
        sq[j] += row[j] * row[j];
      }
    }
    n += f.num_frames();
  }
  FeatureStats stats;
  stats.mean.resize(mean.size());
  stats.inv_std.resize(mean.size());
  for (size_t j = 0; j < mean.size(); ++j) {
    stats.mean[j] = mean[j] / n;
    const double var = sq[j] / n - stats.mean[j] * stats.mean[j];
    stats.inv_std[j] = var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
  }
  return stats;
}

Matrix<float> prepare_fbank(const dsp::FeatureMatrix& fbank,
                            const FeatureStats& stats) {
  CDF_CHECK(fbank.dim() == static_cast<int>(stats.mean.size()),
            "feature dim does not match the standardization stats");
  Matrix<float> out(fbank.num_frames(), fbank.dim());
  for (int t = 0; t < fbank.num_frames(); ++t) {
    const double* src = fbank.data.row(t);
    float* dst = out.row(t);
    for (int j = 0; j < fbank.dim(); ++j)
      dst[j] = static_cast<float>((src[j] - stats.mean[j]) *
                                  stats.inv_std[j]);
  }
  return out;
}

int stage_splice_context(StageKind kind) {
  switch (kind) {
    case StageKind::kLinguistic:
      return models::kLinguisticSpliceContext;
    case StageKind::kSpeaker:
      return models::kSpeakerSpliceContext;
    case StageKind::kEmotion:
      return models::kEmotionSpliceContext;
    case StageKind::kRecon:
      return recon::kFactorSpliceContext;
  }
  return 0;
}

nn::NetworkSpec stage_spec(const StageDef& stage,
                           const synth::CorpusManifest& corpus) {
  const int phones = corpus.num_phones();
  switch (stage.kind) {
    case StageKind::kLinguistic: {
      const int splice = 2 * models::kLinguisticSpliceContext + 1;
      return models::build_linguistic_net(phones, splice * 40);
    }
    case StageKind::kSpeaker:
      return models::build_speaker_net(
          corpus.num_speakers(),
          stage.condition_on_linguistic ? phones : 0);
    case StageKind::kEmotion:
      return models::build_emotion_net(
          corpus.num_emotions(),
          stage.condition_on_linguistic ? phones : 0,
          stage.condition_on_speaker ? models::kSpeakerFactorDim : 0);
    case StageKind::kRecon:
      throw Error("recon has no single network spec");
  }
  throw Error("unreachable");
}

std::filesystem::path stage_dir(const std::filesystem::path& cache_dir,
                                const std::string& stage) {
  return cache_dir / stage;
}

std::filesystem::path model_path(const std::filesystem::path& cache_dir,
                                 const std::string& stage) {
  return stage_dir(cache_dir, stage) / "model.cdfn";
}

void require_stage_model(const std::filesystem::path& cache_dir,
                         const std::string& stage) {
  const auto p = model_path(cache_dir, stage);
  if (!std::filesystem::exists(p))
    throw UsageError("missing trained model for stage '" + stage + "' (" +
                     p.string() + "); run `cdf train " + stage + "` first");
}

void require_factor_cache(const std::filesystem::path& cache_dir,
                          const std::string& stage,
                          const synth::CorpusManifest& corpus) {
  const auto dir = stage_dir(cache_dir, stage);
  for (const auto& utt : corpus.utts) {
    if (!std::filesystem::exists(dir / (utt.id + ".cdff")))
      throw UsageError("missing cached factors for stage '" + stage +
                       "' (utterance " + utt.id + "); run `cdf extract " +
                       stage + "` first");
  }
}

void cache_factors(const models::FactorStream& stream,
                   const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  models::save_factor(stream, dir / (stream.utterance_id + ".cdff"));
}

models::FactorStream load_factors(const std::filesystem::path& cache_dir,
                                  const std::string& stage,
                                  const std::string& utterance_id,
                                  models::FactorKind expected_kind) {
  const auto p = stage_dir(cache_dir, stage) / (utterance_id + ".cdff");
  if (!std::filesystem::exists(p))
    throw UsageError("missing cached factors for stage '" + stage +
                     "' (utterance " + utterance_id + "); run `cdf extract " +
                     stage + "` first");
  models::FactorStream stream = models::load_factor(p);
  if (stream.kind != expected_kind)
    throw Error(strprintf("factor cache %s holds %s factors, expected %s",
                          p.c_str(), models::factor_kind_name(stream.kind),
                          models::factor_kind_name(expected_kind)));
  return stream;
}

// ---------------------------------------------------------------------------
// Training data

namespace {

struct UttData {
  Matrix<float> feats;               // cmvn'd fbank, T x 40
  std::vector<int> labels;           // per frame
  std::vector<Matrix<float>> sides;  // conditioning streams, order (q, s)
};

struct StageData {
  std::vector<UttData> utts;
  int num_classes = 0;
};

// Conditioning sources for a stage, in side-input order (linguistic, speaker).
std::vector<std::pair<std::string, models::FactorKind>> conditioning_sources(
    const StagePlan& plan) {
  std::vector<std::pair<std::string, models::FactorKind>> out;
  if (plan.stage.condition_on_linguistic)
    out.emplace_back("ling", models::FactorKind::kLinguistic);
  if (plan.stage.condition_on_speaker)
    out.emplace_back(plan.speaker_factor_source,
                     models::FactorKind::kSpeaker);
  return out;
}

StageData load_stage_data(const StagePlan& plan) {
  const synth::CorpusManifest& corpus = *plan.corpus;
  const auto sources = conditioning_sources(plan);
  for (const auto& [stage, kind] : sources)
    require_factor_cache(plan.cache_dir, stage, corpus);
  const FeatureStats stats = compute_feature_stats(corpus);

  StageData data;
  data.utts.resize(corpus.utts.size());
  switch (plan.stage.kind) {
    case StageKind::kLinguistic:
      data.num_classes = corpus.num_phones();
      break;
    case StageKind::kSpeaker:
      data.num_classes = corpus.num_speakers();
      break;
    case StageKind::kEmotion:
      data.num_classes = corpus.num_emotions();
      break;
    case StageKind::kRecon:
      throw Error("recon uses its own dataset assembly");
  }

  parallel_for(static_cast<int>(corpus.utts.size()), plan.threads,
               [&](int i) {
    const synth::UttRecord& rec = corpus.utts[i];
    UttData& u = data.utts[i];
    u.feats = prepare_fbank(dsp::load_feature(corpus.fbank_path(i)), stats);
    if (u.feats.rows() != rec.frames)
      throw Error("feature file frame count differs from manifest: " +
                  rec.id);
    switch (plan.stage.kind) {
      case StageKind::kLinguistic: {
        const auto phones =
            synth::load_phone_labels(corpus.phone_path(i), rec.frames);
        u.labels.assign(phones.begin(), phones.end());
        break;
      }
      case StageKind::kSpeaker:
        u.labels.assign(rec.frames, rec.speaker);
        break;
      case StageKind::kEmotion:
        u.labels.assign(rec.frames, rec.emotion);
        break;
      default:
        break;
    }
    for (const auto& [stage, kind] : sources) {
      models::FactorStream f =
          load_factors(plan.cache_dir, stage, rec.id, kind);
      if (f.num_frames() != rec.frames)
        throw Error(strprintf(
            "conditioning stream '%s' has %d frames, features have %d "
            "(utterance %s)",
            stage.c_str(), f.num_frames(), rec.frames, rec.id.c_str()));
      for (size_t k = 0; k < f.data.size(); ++k)
        f.data.data()[k] *= models::kConditioningScale;
      u.sides.push_back(std::move(f.data));
    }
  });
  return data;
}

// ---------------------------------------------------------------------------
// Minibatch trainer. Networks without time-delay layers train on globally
// shuffled frames; time-delay networks train on contiguous frame segments
// (with replicated-edge context margins) shuffled globally, which keeps
// the temporal semantics of full-utterance processing exact.

struct Batch {
  Matrix<float> x;
  std::vector<Matrix<float>> sides;
  std::vector<int> labels;
  int labeled = 0;
};

void build_frame_batch(const StageData& data, int splice,
                       std::span<const std::pair<int, int>> items,
                       Batch* batch) {
  const int b = static_cast<int>(items.size());
  const int n_sides =
      data.utts.empty() ? 0 : static_cast<int>(data.utts[0].sides.size());
  const int d = data.utts[0].feats.cols() * (2 * splice + 1);
  batch->x = Matrix<float>(b, d);
  batch->sides.assign(n_sides, Matrix<float>());
  for (int s = 0; s < n_sides; ++s)
    batch->sides[s] = Matrix<float>(b, data.utts[0].sides[s].cols());
  batch->labels.resize(b);
  for (int i = 0; i < b; ++i) {
    const auto [ui, t] = items[i];
    const UttData& u = data.utts[ui];
    gather_context_row(u.feats, t, splice, splice, batch->x.row(i));
    for (int s = 0; s < n_sides; ++s)
      std::copy(u.sides[s].row(t), u.sides[s].row(t) + u.sides[s].cols(),
                batch->sides[s].row(i));
    batch->labels[i] = u.labels[t];
  }
  batch->labeled = b;
}

struct Segment {
  int utt = 0, start = 0, len = 0;
};

// Short segment tiles are shuffled globally and several of them form one
// minibatch, so each optimizer step mixes utterances (and therefore
// classes). Every tile carries its own replicated-edge context margin;
// labeled rows never reach across a tile boundary, which keeps the
// time-delay semantics identical to full-utterance processing.
inline constexpr int kSegmentFrames = 16;

void build_segment_batch(const StageData& data, int splice, int ctx_left,
                         int ctx_right, std::span<const Segment> segments,
                         Batch* batch) {
  int rows = 0, labeled = 0;
  for (const Segment& seg : segments) {
    rows += seg.len + ctx_left + ctx_right;
    labeled += seg.len;
  }
  const int n_sides = data.utts.empty()
                          ? 0
                          : static_cast<int>(data.utts[0].sides.size());
  const int d = data.utts[0].feats.cols() * (2 * splice + 1);
  batch->x = Matrix<float>(rows, d);
  batch->sides.assign(n_sides, Matrix<float>());
  for (int s = 0; s < n_sides; ++s)
    batch->sides[s] = Matrix<float>(rows, data.utts[0].sides[s].cols());
  batch->labels.assign(rows, -1);
  int row0 = 0;
  for (const Segment& seg : segments) {
    const UttData& u = data.utts[seg.utt];
    const int t_max = u.feats.rows() - 1;
    const int block = seg.len + ctx_left + ctx_right;
    for (int r = 0; r < block; ++r) {
      const int frame = std::clamp(seg.start - ctx_left + r, 0, t_max);
      gather_context_row(u.feats, frame, splice, splice,
                         batch->x.row(row0 + r));
      for (int s = 0; s < n_sides; ++s)
        std::copy(u.sides[s].row(frame),
                  u.sides[s].row(frame) + u.sides[s].cols(),
                  batch->sides[s].row(row0 + r));
      if (r >= ctx_left && r < ctx_left + seg.len)
        batch->labels[row0 + r] = u.labels[seg.start + r - ctx_left];
    }
    row0 += block;
  }
  batch->labeled = labeled;
}

std::vector<const Matrix<float>*> side_ptrs(const Batch& batch) {
  std::vector<const Matrix<float>*> out;
  out.reserve(batch.sides.size());
  for (const auto& s : batch.sides) out.push_back(&s);
  return out;
}

// Mean cross entropy and frame accuracy over whole utterances.
std::pair<double, double> evaluate_utterances(
    const nn::NetworkSpec& spec, const nn::ParamStore<float>& params,
    const StageData& data, int splice, std::span<const int> utt_indices,
    int64_t frame_cap) {
  double loss_sum = 0.0;
  int64_t frames = 0, correct = 0;
  nn::ForwardTrace<float> trace;
  for (int ui : utt_indices) {
    const UttData& u = data.utts[ui];
    Matrix<float> x = gather_context(u.feats, splice, splice);
    std::vector<const Matrix<float>*> sides;
    for (const auto& s : u.sides) sides.push_back(&s);
    nn::network_forward(spec, params, x, nn::side_span(sides), &trace);
    const Matrix<float>& probs = trace.output();
    auto [loss, grad] = nn::cross_entropy_loss(
        probs, std::span<const int>(u.labels));
    (void)grad;
    loss_sum += static_cast<double>(loss) * u.labels.size();
    for (int t = 0; t < probs.rows(); ++t) {
      const float* row = probs.row(t);
      int best = 0;
      for (int j = 1; j < probs.cols(); ++j)
        if (row[j] > row[best]) best = j;
      if (best == u.labels[t]) ++correct;
    }
    frames += probs.rows();
    if (frame_cap > 0 && frames >= frame_cap) break;
  }
  if (frames == 0) return {0.0, 0.0};
  return {loss_sum / frames, static_cast<double>(correct) / frames};
}

nn::TrainLog train_network(const nn::NetworkSpec& spec,
                           nn::ParamStore<float>* params,
                           const StageData& data, const Split& split,
                           const nn::TrainConfig& cfg, int splice) {
  const int ctx_left = spec.context_left();
  const int ctx_right = spec.context_right();
  const bool segmented = ctx_left + ctx_right > 0;

  nn::ParamStore<float> grads = nn::zero_params<float>(spec);
  nn::ParamStore<float> velocity = nn::zero_params<float>(spec);
  auto clear_grads = [&grads] {
    for (auto& e : grads.layers) {
      e.w.fill(0.0f);
      std::fill(e.b.begin(), e.b.end(), 0.0f);
    }
  };

  // Full enumerations, reshuffled per epoch.
  std::vector<std::pair<int, int>> frame_pool;
  std::vector<Segment> segment_pool;
  if (segmented) {
    for (int ui : split.train) {
      const int t_count = data.utts[ui].feats.rows();
      for (int start = 0; start < t_count; start += kSegmentFrames) {
        Segment seg;
        seg.utt = ui;
        seg.start = start;
        seg.len = std::min(kSegmentFrames, t_count - start);
        segment_pool.push_back(seg);
      }
    }
  } else {
    for (int ui : split.train)
      for (int t = 0; t < data.utts[ui].feats.rows(); ++t)
        frame_pool.emplace_back(ui, t);
  }
  const int segments_per_batch =
      std::max(1, cfg.minibatch_size / kSegmentFrames);

  nn::TrainLog log;
  double lr = cfg.learning_rate;
  double best_val = 1e300;
  int consecutive_rises = 0;
  Rng run_rng(cfg.seed);
  const std::vector<int>& val_set =
      split.val.empty() ? split.train : split.val;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng epoch_rng = run_rng.split(1000 + static_cast<uint64_t>(epoch));
    double train_loss = 0.0;
    int64_t trained = 0;
    Batch batch;
    nn::ForwardTrace<float> trace;

    if (segmented) {
      std::vector<Segment> order = segment_pool;
      epoch_rng.shuffle(order);
      for (size_t pos = 0; pos < order.size();
           pos += segments_per_batch) {
        if (cfg.frames_per_epoch > 0 && trained >= cfg.frames_per_epoch)
          break;
        const size_t group =
            std::min<size_t>(segments_per_batch, order.size() - pos);
        build_segment_batch(data, splice, ctx_left, ctx_right,
                            std::span(order.data() + pos, group), &batch);
        auto sides = side_ptrs(batch);
        nn::network_forward(spec, *params, batch.x, nn::side_span(sides), &trace);
        auto [loss, grad] = nn::cross_entropy_loss(
            trace.output(), std::span<const int>(batch.labels));
        clear_grads();
        nn::network_backward(spec, *params, trace, grad, true, &grads);
        nn::sgd_step(params, grads, &velocity, lr, cfg.momentum);
        train_loss += static_cast<double>(loss) * batch.labeled;
        trained += batch.labeled;
      }
    } else {
      std::vector<std::pair<int, int>> order = frame_pool;
      epoch_rng.shuffle(order);
      int64_t take = static_cast<int64_t>(order.size());
      if (cfg.frames_per_epoch > 0)
        take = std::min(take, cfg.frames_per_epoch);
      for (int64_t pos = 0; pos < take; pos += cfg.minibatch_size) {
        const int b = static_cast<int>(
            std::min<int64_t>(cfg.minibatch_size, take - pos));
        build_frame_batch(data, splice,
                          std::span(order.data() + pos, b), &batch);
        auto sides = side_ptrs(batch);
        nn::network_forward(spec, *params, batch.x, nn::side_span(sides), &trace);
        auto [loss, grad] = nn::cross_entropy_loss(
            trace.output(), std::span<const int>(batch.labels));
        clear_grads();
        nn::network_backward(spec, *params, trace, grad, true, &grads);
        nn::sgd_step(params, grads, &velocity, lr, cfg.momentum);
        train_loss += static_cast<double>(loss) * b;
        trained += b;
      }
    }
    train_loss /= std::max<int64_t>(trained, 1);

    auto [val_loss, val_acc] = evaluate_utterances(
        spec, *params, data, splice, val_set, 10000);
    nn::EpochLog el;
    el.epoch = epoch;
    el.train_loss = train_loss;
    el.val_loss = val_loss;
    el.frame_accuracy = val_acc;
    el.learning_rate = lr;
    log.epochs.push_back(el);
    log_info(strprintf(
        "epoch %d: train loss %.5f, val loss %.5f, val acc %.4f, lr %g",
        epoch, train_loss, val_loss, val_acc, lr));

    if (epoch > 0) {
      if (val_loss > log.epochs[epoch - 1].val_loss)
        ++consecutive_rises;
      else
        consecutive_rises = 0;
      if (consecutive_rises >= 3) {
        log_info("early stop: validation loss rose 3 epochs in a row");
        break;
      }
    }
    if (val_loss > best_val - cfg.lr_halving_threshold && lr > 1e-6)
      lr *= 0.5;
    best_val = std::min(best_val, val_loss);
  }

  if (!log.epochs.empty() &&
      log.epochs.back().val_loss > log.epochs.front().val_loss) {
    log.final_worse_than_first = true;
    log_warn("final validation loss above first epoch");
  }
  return log;
}

nn::TrainLog train_recon_stage(const StagePlan& plan) {
  const synth::CorpusManifest& corpus = *plan.corpus;
  require_factor_cache(plan.cache_dir, "ling", corpus);
  require_factor_cache(plan.cache_dir, plan.speaker_factor_source, corpus);
  require_factor_cache(plan.cache_dir, plan.emotion_factor_source, corpus);

  recon::ReconDataset dataset;
  dataset.utts.resize(corpus.utts.size());
  parallel_for(static_cast<int>(corpus.utts.size()), plan.threads,
               [&](int i) {
    const auto& rec = corpus.utts[i];
    recon::ReconUtt& u = dataset.utts[i];
    u.q = load_factors(plan.cache_dir, "ling", rec.id,
                       models::FactorKind::kLinguistic)
              .data;
    u.s = load_factors(plan.cache_dir, plan.speaker_factor_source, rec.id,
                       models::FactorKind::kSpeaker)
              .data;
    u.e = load_factors(plan.cache_dir, plan.emotion_factor_source, rec.id,
                       models::FactorKind::kEmotion)
              .data;
    u.target = convert_matrix<float>(dsp::load_feature(corpus.spec_path(i)).data);
    if (u.q.rows() != u.target.rows() || u.s.rows() != u.target.rows() ||
        u.e.rows() != u.target.rows())
      throw Error("factor/target frame mismatch for utterance " + rec.id);
  });

  const Split split = split_utterances(corpus, plan.train_cfg.seed);
  dataset.train = split.train;
  dataset.val = split.val;

  Rng init_rng = Rng(plan.train_cfg.seed).split(hash64("recon-init"));
  recon::ReconModel model = recon::build_recon_model(
      corpus.num_phones(), dataset.utts[0].target.cols(), &init_rng);

  nn::TrainLog log;
  recon::ReconReport report =
      recon::train_recon(&model, dataset, plan.train_cfg, &log);

  const auto dir = stage_dir(plan.cache_dir, plan.stage.name);
  std::filesystem::create_directories(dir);
  recon::save_recon_model(model, model_path(plan.cache_dir, plan.stage.name));
  write_train_log_csv(log, dir / "train_log.csv");
  recon::write_recon_report_csv(report, dir / "recon_report.csv");
  return log;
}

}  // namespace

nn::TrainLog train_stage(const StagePlan& plan) {
  CDF_CHECK(plan.corpus != nullptr, "stage plan has no corpus");
  if (plan.corpus->utts.empty())
    throw UsageError("corpus is empty; run `cdf gen-corpus` first");
  if (plan.stage.kind == StageKind::kRecon) return train_recon_stage(plan);

  StageData data = load_stage_data(plan);
  const Split split = split_utterances(*plan.corpus, plan.train_cfg.seed);
  nn::NetworkSpec spec = stage_spec(plan.stage, *plan.corpus);
  Rng init_rng =
      Rng(plan.train_cfg.seed).split(hash64(("init." + plan.stage.name).c_str()));
  nn::ParamStore<float> params = nn::init_params<float>(spec, &init_rng);

  log_info("training stage '" + plan.stage.name + "'");
  nn::TrainLog log =
      train_network(spec, &params, data, split, plan.train_cfg,
                    stage_splice_context(plan.stage.kind));

  const auto dir = stage_dir(plan.cache_dir, plan.stage.name);
  std::filesystem::create_directories(dir);
  nn::save_model(spec, params, model_path(plan.cache_dir, plan.stage.name));
  write_train_log_csv(log, dir / "train_log.csv");
  return log;
}

void extract_stage(const StagePlan& plan) {
  CDF_CHECK(plan.corpus != nullptr, "stage plan has no corpus");
  if (plan.stage.kind == StageKind::kRecon)
    throw UsageError("stage 'recon' has no factors to extract; "
                     "use `cdf reconstruct <utterance>`");
  const synth::CorpusManifest& corpus = *plan.corpus;
  require_stage_model(plan.cache_dir, plan.stage.name);
  const auto sources = conditioning_sources(plan);
  for (const auto& [stage, kind] : sources)
    require_factor_cache(plan.cache_dir, stage, corpus);

  auto [spec, params] = nn::load_model(model_path(plan.cache_dir,
                                                  plan.stage.name));
  nn::NetworkSpec expected = stage_spec(plan.stage, corpus);
  if (!spec.same_topology(expected))
    throw Error("cached model for stage '" + plan.stage.name +
                "' does not match the configured architecture");
  spec.taps = expected.taps;

  std::string tap;
  models::FactorKind kind;
  switch (plan.stage.kind) {
    case StageKind::kLinguistic:
      tap = "posteriors";
      kind = models::FactorKind::kLinguistic;
      break;
    case StageKind::kSpeaker:
      tap = "feature";
      kind = models::FactorKind::kSpeaker;
      break;
    case StageKind::kEmotion:
      tap = "emotion";
      kind = models::FactorKind::kEmotion;
      break;
    default:
      return;
  }
  const int splice = stage_splice_context(plan.stage.kind);
  const auto out_dir = stage_dir(plan.cache_dir, plan.stage.name);
  std::filesystem::create_directories(out_dir);
  const FeatureStats stats = compute_feature_stats(corpus);

  parallel_for(static_cast<int>(corpus.utts.size()), plan.threads,
               [&](int i) {
    const auto& rec = corpus.utts[i];
    Matrix<float> feats =
        prepare_fbank(dsp::load_feature(corpus.fbank_path(i)), stats);
    Matrix<float> x = gather_context(feats, splice, splice);
    std::vector<models::FactorStream> cond_streams;
    std::vector<const Matrix<float>*> sides;
    for (const auto& [stage, k] : sources) {
      cond_streams.push_back(load_factors(plan.cache_dir, stage, rec.id, k));
      if (cond_streams.back().num_frames() != feats.rows())
        throw Error(strprintf(
            "conditioning stream '%s' has %d frames, features have %d "
            "(utterance %s)",
            stage.c_str(), cond_streams.back().num_frames(), feats.rows(),
            rec.id.c_str()));
    }
    for (auto& c : cond_streams) {
      for (size_t k = 0; k < c.data.size(); ++k)
        c.data.data()[k] *= models::kConditioningScale;
      sides.push_back(&c.data);
    }
    models::FactorStream out =
        models::extract_factors(spec, params, x, nn::side_span(sides), tap, kind, rec.id);
    models::save_factor(out, out_dir / (rec.id + ".cdff"));
  });
  log_info("extracted " + std::to_string(corpus.utts.size()) +
           " factor streams for stage '" + plan.stage.name + "'");
}

CascadeModelSet load_cascade_models(const std::filesystem::path& cache_dir,
                                    const synth::CorpusManifest& corpus,
                                    const std::string& spk_stage,
                                    const std::string& emo_stage) {
  CascadeModelSet set;
  set.phones = corpus.num_phones();
  set.speakers = corpus.num_speakers();
  set.emotions = corpus.num_emotions();
  const StageDef emo_def = stage_by_name(emo_stage);
  set.emo_uses_linguistic = emo_def.condition_on_linguistic;
  set.emo_uses_speaker = emo_def.condition_on_speaker;
  set.stats = compute_feature_stats(corpus);
  for (const auto& [name, spec_out, params_out] :
       {std::tuple<std::string, nn::NetworkSpec*, nn::ParamStore<float>*>{
            "ling", &set.ling_spec, &set.ling},
        {spk_stage, &set.spk_spec, &set.spk},
        {emo_stage, &set.emo_spec, &set.emo}}) {
    require_stage_model(cache_dir, name);
    auto [spec, params] = nn::load_model(model_path(cache_dir, name));
    nn::NetworkSpec expected = stage_spec(stage_by_name(name), corpus);
    if (!spec.same_topology(expected))
      throw Error("cached model for stage '" + name +
                  "' does not match the configured architecture");
    spec.taps = expected.taps;
    *spec_out = std::move(spec);
    *params_out = std::move(params);
  }
  return set;
}

CascadeFactors run_cascade(const CascadeModelSet& models_set,
                           const dsp::FeatureMatrix& fbank,
                           const std::string& utterance_id) {
  Matrix<float> feats = prepare_fbank(fbank, models_set.stats);
  CascadeFactors out;

  Matrix<float> x_ling = gather_context(feats, models::kLinguisticSpliceContext,
                                        models::kLinguisticSpliceContext);
  out.q = models::extract_factors(models_set.ling_spec, models_set.ling,
                                  x_ling, {}, "posteriors",
                                  models::FactorKind::kLinguistic,
                                  utterance_id);

  auto scaled = [](const Matrix<float>& m) {
    Matrix<float> s = m;
    for (size_t k = 0; k < s.size(); ++k)
      s.data()[k] *= models::kConditioningScale;
    return s;
  };
  const Matrix<float> q_cond = scaled(out.q.data);

  Matrix<float> x_spk = gather_context(feats, models::kSpeakerSpliceContext,
                                       models::kSpeakerSpliceContext);
  const Matrix<float>* spk_sides[] = {&q_cond};
  const bool spk_conditioned = models_set.spk_spec.num_side_inputs() > 0;
  out.s = models::extract_factors(
      models_set.spk_spec, models_set.spk, x_spk,
      spk_conditioned
          ? std::span<const Matrix<float>* const>(spk_sides, 1)
          : std::span<const Matrix<float>* const>(),
      "feature", models::FactorKind::kSpeaker, utterance_id);

  Matrix<float> x_emo = gather_context(feats, models::kEmotionSpliceContext,
                                       models::kEmotionSpliceContext);
  const Matrix<float> s_cond = scaled(out.s.data);
  std::vector<const Matrix<float>*> emo_sides;
  if (models_set.emo_uses_linguistic) emo_sides.push_back(&q_cond);
  if (models_set.emo_uses_speaker) emo_sides.push_back(&s_cond);
  out.e = models::extract_factors(models_set.emo_spec, models_set.emo, x_emo,
                                  emo_sides, "emotion",
                                  models::FactorKind::kEmotion, utterance_id);
  return out;
}

void write_train_log_csv(const nn::TrainLog& log,
                         const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot write " + path.string());
  os << "epoch,train_loss,val_loss,frame_accuracy,learning_rate\n";
  for (const auto& e : log.epochs)
    os << strprintf("%d,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.train_loss,
                    e.val_loss, e.frame_accuracy, e.learning_rate);
  if (log.final_worse_than_first)
    os << "warning,final_val_worse_than_first,,,\n";
}

}  // namespace cascade
}  // namespace cdf

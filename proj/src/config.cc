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

#include "cdf/config.h"

#include <fstream>
#include <set>

#include <json.hpp>

#include "cdf/cascade.h"

namespace cdf {
namespace cli {

using nlohmann::json;

namespace {

void check_keys(const json& obj, const std::set<std::string>& allowed,
                const std::string& section) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key()))
      throw UsageError("unknown key '" + it.key() + "' in config section '" +
                       section + "'");
  }
}

template <typename T>
void get_to(const json& obj, const char* key, T* out) {
  if (obj.contains(key)) obj.at(key).get_to(*out);
}

nn::TrainConfig default_stage_cfg(const std::string& name, uint64_t seed) {
  nn::TrainConfig cfg;
  cfg.seed = seed;
  cfg.momentum = 0.9;
  cfg.lr_halving_threshold = 1e-4;
  if (name == "ling") {
    cfg.learning_rate = 0.02;
    cfg.minibatch_size = 256;
    cfg.epochs = 5;
    cfg.frames_per_epoch = 10000;
  } else if (name == "spk-idf" || name == "spk-cdf") {
    cfg.learning_rate = 0.01;
    cfg.minibatch_size = 128;
    cfg.epochs = 12;
    cfg.frames_per_epoch = 22000;
  } else if (name == "recon") {
    cfg.learning_rate = 0.01;
    cfg.minibatch_size = 128;
    cfg.epochs = 8;
    cfg.frames_per_epoch = 3000;
  } else {  // emotion stages
    cfg.learning_rate = 0.01;
    cfg.minibatch_size = 128;
    cfg.epochs = 8;
    cfg.frames_per_epoch = 10000;
  }
  return cfg;
}

void parse_dsp(const json& obj, dsp::FrameConfig* cfg) {
  check_keys(obj,
             {"frame_length_ms", "frame_shift_ms", "fft_size", "n_mels",
              "log_floor", "preemphasis", "preemphasis_coeff", "dither"},
             "dsp");
  get_to(obj, "frame_length_ms", &cfg->frame_length_ms);
  get_to(obj, "frame_shift_ms", &cfg->frame_shift_ms);
  get_to(obj, "fft_size", &cfg->fft_size);
  get_to(obj, "n_mels", &cfg->n_mels);
  get_to(obj, "log_floor", &cfg->log_floor);
  get_to(obj, "preemphasis", &cfg->preemphasis);
  get_to(obj, "preemphasis_coeff", &cfg->preemphasis_coeff);
  get_to(obj, "dither", &cfg->dither);
}

void parse_corpus(const json& obj, synth::GenConfig* cfg) {
  check_keys(obj,
             {"phones", "speakers", "emotions", "spectrum_bins",
              "utterances_per_pair", "min_frames", "max_frames", "noise_std",
              "phone_scale", "speaker_scale", "emotion_scale",
              "min_phone_frames", "speaker_emotion_interaction", "seed",
              "sample_rate", "n_mels"},
             "corpus");
  get_to(obj, "phones", &cfg->phones);
  get_to(obj, "speakers", &cfg->speakers);
  get_to(obj, "emotions", &cfg->emotions);
  get_to(obj, "spectrum_bins", &cfg->spectrum_bins);
  get_to(obj, "utterances_per_pair", &cfg->utts_per_pair);
  get_to(obj, "min_frames", &cfg->min_frames);
  get_to(obj, "max_frames", &cfg->max_frames);
  get_to(obj, "noise_std", &cfg->noise_std);
  get_to(obj, "phone_scale", &cfg->phone_scale);
  get_to(obj, "speaker_scale", &cfg->speaker_scale);
  get_to(obj, "emotion_scale", &cfg->emotion_scale);
  get_to(obj, "min_phone_frames", &cfg->min_phone_frames);
  get_to(obj, "speaker_emotion_interaction",
         &cfg->speaker_emotion_interaction);
  get_to(obj, "seed", &cfg->seed);
  get_to(obj, "sample_rate", &cfg->sample_rate);
  get_to(obj, "n_mels", &cfg->n_mels);
}

void parse_stage(const json& obj, RunConfig* cfg) {
  check_keys(obj,
             {"name", "learning_rate", "momentum", "minibatch_size", "epochs",
              "seed", "lr_halving_threshold", "frames_per_epoch"},
             "stages[]");
  if (!obj.contains("name"))
    throw UsageError("config stages[] entry is missing 'name'");
  const std::string name = obj.at("name").get<std::string>();
  cascade::stage_by_name(name);  // validates
  nn::TrainConfig& st = cfg->stages.at(name);
  get_to(obj, "learning_rate", &st.learning_rate);
  get_to(obj, "momentum", &st.momentum);
  get_to(obj, "minibatch_size", &st.minibatch_size);
  get_to(obj, "epochs", &st.epochs);
  get_to(obj, "seed", &st.seed);
  get_to(obj, "lr_halving_threshold", &st.lr_halving_threshold);
  get_to(obj, "frames_per_epoch", &st.frames_per_epoch);
  if (st.learning_rate <= 0 || st.momentum < 0 || st.momentum >= 1 ||
      st.minibatch_size < 1 || st.epochs < 1 || st.frames_per_epoch < 0)
    throw UsageError("invalid training parameters for stage '" + name + "'");
}

void parse_eval(const json& obj, EvalSection* cfg) {
  check_keys(obj, {"conditions", "max_segments_per_speaker"}, "eval");
  if (obj.contains("conditions")) {
    cfg->conditions.clear();
    for (const auto& c : obj.at("conditions")) {
      if (!c.is_array() || c.size() != 2)
        throw UsageError(
            "eval.conditions entries must be [enroll_seconds, test_frames]");
      eval::TrialCondition cond;
      cond.enroll_seconds = c.at(0).get<double>();
      cond.test_frames = c.at(1).get<int>();
      cfg->conditions.push_back(cond);
    }
  }
  get_to(obj, "max_segments_per_speaker", &cfg->max_segments_per_speaker);
}

}  // namespace

const nn::TrainConfig& RunConfig::stage_cfg(const std::string& name) const {
  auto it = stages.find(name);
  if (it == stages.end())
    throw UsageError("no configuration for stage '" + name + "'");
  return it->second;
}

RunConfig default_config() {
  RunConfig cfg;
  cfg.corpus.seed = cfg.seed;
  for (const auto& name : cascade::all_stage_names())
    cfg.stages[name] = default_stage_cfg(name, cfg.seed);
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open config file: " + path.string());
  json root;
  try {
    root = json::parse(is);
  } catch (const json::parse_error& e) {
    throw UsageError(strprintf("malformed config %s: %s", path.c_str(),
                               e.what()));
  }
  if (!root.is_object()) throw UsageError("config root must be an object");
  check_keys(root,
             {"seed", "threads", "paths", "dsp", "corpus", "stages", "eval",
              "recon", "speaker_factor_source", "emotion_factor_source"},
             "(root)");

  RunConfig cfg;
  get_to(root, "seed", &cfg.seed);
  get_to(root, "threads", &cfg.threads);
  if (cfg.threads < 1) throw UsageError("threads must be >= 1");

  // Derived defaults depend on the seed, so fill them before overrides.
  cfg.corpus.seed = cfg.seed;
  for (const auto& name : cascade::all_stage_names())
    cfg.stages[name] = default_stage_cfg(name, cfg.seed);

  std::filesystem::path work_dir = "work";
  if (root.contains("paths")) {
    const json& paths = root.at("paths");
    check_keys(paths, {"work_dir"}, "paths");
    if (paths.contains("work_dir"))
      work_dir = paths.at("work_dir").get<std::string>();
  }
  const auto base = std::filesystem::absolute(path).parent_path();
  cfg.work_dir = work_dir.is_absolute() ? work_dir : base / work_dir;

  if (root.contains("dsp")) parse_dsp(root.at("dsp"), &cfg.frame);
  if (root.contains("corpus")) parse_corpus(root.at("corpus"), &cfg.corpus);
  if (root.contains("stages")) {
    if (!root.at("stages").is_array())
      throw UsageError("config 'stages' must be an array");
    for (const auto& st : root.at("stages")) parse_stage(st, &cfg);
  }
  if (root.contains("eval")) parse_eval(root.at("eval"), &cfg.eval);
  if (root.contains("recon")) {
    const json& rec = root.at("recon");
    check_keys(rec, {"render_utterance"}, "recon");
    get_to(rec, "render_utterance", &cfg.recon.render_utterance);
  }
  get_to(root, "speaker_factor_source", &cfg.speaker_factor_source);
  get_to(root, "emotion_factor_source", &cfg.emotion_factor_source);
  if (cfg.speaker_factor_source != "spk-cdf" &&
      cfg.speaker_factor_source != "spk-idf")
    throw UsageError("speaker_factor_source must be spk-cdf or spk-idf");
  if (cascade::stage_by_name(cfg.emotion_factor_source).kind !=
      cascade::StageKind::kEmotion)
    throw UsageError("emotion_factor_source must be an emotion stage");

  cfg.corpus.validate();
  return cfg;
}

}  // namespace cli
}  // namespace cdf

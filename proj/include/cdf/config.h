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

#ifndef CDF_CONFIG_H_
#define CDF_CONFIG_H_

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cdf/dsp.h"
#include "cdf/eval.h"
#include "cdf/nn.h"
#include "cdf/synthcorpus.h"

namespace cdf {
namespace cli {

struct EvalSection {
  std::vector<eval::TrialCondition> conditions = {
      {30.0, 20}, {30.0, 50}, {30.0, 100}};
  int max_segments_per_speaker = 50;
};

struct ReconSection {
  // Utterance rendered by `cdf reconstruct` when none is given on the
  // command line; empty picks the first validation utterance.
  std::string render_utterance;
};

// One JSON file drives a whole experiment; unknown keys are rejected and
// every path is resolved relative to the config file. The run seed feeds
// the corpus generator, the train/validation split and, unless a stage
// overrides it, every stage trainer.
struct RunConfig {
  uint64_t seed = 1;
  int threads = 1;
  std::filesystem::path work_dir = "work";
  dsp::FrameConfig frame;
  synth::GenConfig corpus;
  std::map<std::string, nn::TrainConfig> stages;  // fully populated
  EvalSection eval;
  ReconSection recon;
  std::string speaker_factor_source = "spk-cdf";
  std::string emotion_factor_source = "emo-ling-spk";

  std::filesystem::path corpus_dir() const { return work_dir / "corpus"; }
  std::filesystem::path manifest_path() const {
    return corpus_dir() / "manifest.tsv";
  }
  std::filesystem::path cache_dir() const { return work_dir / "cache"; }
  std::filesystem::path report_dir() const { return work_dir / "report"; }

  const nn::TrainConfig& stage_cfg(const std::string& name) const;
};

// Desk-scale defaults (used verbatim when the config file is "{}").
RunConfig default_config();

RunConfig load_config(const std::filesystem::path& path);

}  // namespace cli
}  // namespace cdf

#endif  // CDF_CONFIG_H_

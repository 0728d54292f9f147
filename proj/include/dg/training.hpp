#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dg/config.hpp"
#include "dg/featurizers.hpp"
#include "dg/losses.hpp"
#include "dg/rng.hpp"
#include "dg/synth_data.hpp"

namespace dg {

// Training-time view of a corpus: all samples resident in memory, indexed per
// regime. Object masks are dropped unless kept for evaluation use.
struct TrainingCorpus {
    DataConfig data;
    std::vector<SamplePair> samples;
    std::vector<std::size_t> language, sound; // indices into samples per regime
};

TrainingCorpus load_training_corpus(const std::string& corpus_dir, bool keep_masks = false);

// One assembled batch: augmented copies of the chosen samples plus their
// corpus indices (the batch ids quoted by diagnostics).
struct Batch {
    std::vector<SamplePair> items;
    std::vector<std::size_t> ids;
};

// Deterministic batch assembly, stateless in (seed, step): mixed mode takes
// B/2 per regime, single-regime modes take all B from one pool. Samples are
// drawn without replacement within an epoch (one pass over the smaller
// regime); flip and splice augmentations are applied here.
// Throws InsufficientSamples when a requested pool cannot fill its share.
Batch make_batch(const TrainingCorpus& corpus, const TrainConfig& t, std::uint64_t seed,
                 std::int64_t step);

// Raw-sample splice/silence mask -> per-frame mask by averaging each
// stride-sized window (the frame is "spliced" to the degree its samples are).
std::vector<double> frame_splice_mask(const std::vector<double>& raw, std::int64_t stride);

// ---- optimizer ---------------------------------------------------------------

struct AdamSlot {
    std::vector<double> m, v;
};

struct AdamState {
    std::int64_t t = 0; // completed updates (shared bias-correction counter)
    std::map<std::string, AdamSlot> slots;
};

// Standard bias-corrected Adam over the given named parameters, reading each
// tensor's accumulated gradient (an untouched gradient counts as zero).
// Missing slots are created zero-initialized; ShapeMismatch thereafter.
void adam_step(const std::vector<ModelParams::Named>& params, AdamState& state, double lr,
               double beta1, double beta2, double eps);

// Scales every gradient by min(1, max_norm / ||g||_2) where the norm runs over
// all listed tensors jointly. Returns the pre-clip norm.
double clip_global_norm(const std::vector<ModelParams::Named>& params, double max_norm);

// ---- the training loop -------------------------------------------------------

struct StepRecord {
    std::int64_t step = 0;
    LossBreakdown loss;
    double grad_norm = 0; // pre-clip global norm
};

// JSON-lines entry with exactly the documented keys.
std::string step_record_line(const StepRecord& r);

// Executes global steps [from, to) of the two-phase schedule: steps below
// train.warmup_steps update aligner parameters only (backbone tensors stay
// bitwise untouched); later steps update everything. The optimizer state is
// reset at the phase boundary. One record per step is appended to `records`.
// NonFiniteLoss propagates after a diagnostic dump of the offending batch ids.
void train_steps(ModelParams& params, AdamState& state, const TrainingCorpus& corpus,
                 const RunConfig& cfg, std::int64_t from, std::int64_t to,
                 std::vector<StepRecord>& records);

// Phase wrappers over train_steps.
void train_warmup(ModelParams& params, AdamState& state, const TrainingCorpus& corpus,
                  const RunConfig& cfg, std::vector<StepRecord>& records);
void train_full(ModelParams& params, AdamState& state, const TrainingCorpus& corpus,
                const RunConfig& cfg, std::vector<StepRecord>& records);

struct TrainResult {
    ModelParams params;
    std::string final_checkpoint;           // out_dir/final.dgck
    std::vector<std::string> checkpoints;   // cadence checkpoints, in order
    std::string log_path;                   // out_dir/train_log.jsonl
};

// Full run with artifacts: trains from scratch (or resumes from
// `resume_checkpoint`, replaying from its step with the same seed discipline),
// appends the JSONL log, and writes checkpoints every eval cadence plus
// final.dgck. Resuming truncates log entries at or past the resume step so the
// log always matches the trajectory that produced the final checkpoint.
TrainResult run_training(const RunConfig& cfg, const TrainingCorpus& corpus,
                         const std::string& out_dir, const std::string& resume_checkpoint = "");

// Optimizer state <-> checkpoint extra tensors ("adam.t", "adam.m.<param>",
// "adam.v.<param>").
std::vector<std::pair<std::string, TensorPtr>> adam_state_tensors(const AdamState& state);
AdamState adam_state_from_checkpoint(const Checkpoint& ck);

} // namespace dg

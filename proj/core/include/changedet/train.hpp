#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "changedet/data.hpp"
#include "changedet/loss.hpp"
#include "changedet/model.hpp"
#include "changedet/synth.hpp"

namespace cd {

// bad config file / invalid field values (CLI exit 1)
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// non-finite loss; message carries the step index and loss breakdown
struct TrainAbort : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct OptimConfig {
    double base_lr = 1e-4;
    double weight_decay = 0.05;
    double encoder_lr_mult = 0.1;  // must be in (0, 1]
    int freeze_encoder_epochs = 0;
    int epochs = 150;  // >= 1
    int batch_size = 4;
    uint64_t seed = 0;
    double warmup_frac = 0.05;  // linear warmup over this fraction of total steps
    bool augment = true;        // dihedral flips/rotations on training pairs
};

struct DataConfig {
    std::string root;  // expects root/{train,val}/{A,B,label}; empty -> synthetic
    std::string train_split = "train", val_split = "val";
    SynthConfig synth;  // used when root is empty
    int synth_train = 32, synth_val = 8;
};

struct IoConfig {
    std::string out_dir = "run";
    int checkpoint_every = 0;  // extra epoch_<k>.ckpt every k epochs (0 = off)
};

struct RunConfig {
    ModelConfig model;
    LossConfig loss;
    OptimConfig optim;
    DataConfig data;
    IoConfig io;
};

// JSON round-trip. Parsing starts from defaults and overrides present keys;
// unknown keys and wrong value types raise ConfigError naming the key.
// run_config_json emits every field (defaults resolved).
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
std::string run_config_json(const RunConfig& cfg);
void validate_run_config(const RunConfig& cfg);  // throws ConfigError

struct TrainResult {
    std::string history_csv, best_ckpt, last_ckpt, config_json;
    double best_val_iou = 0.0;
    int epochs_run = 0;
};

// Full loop: per-epoch deterministic shuffle + augmentation, AdamW with a
// discounted (and optionally frozen) encoder group, per-epoch validation,
// history.csv rows, best/last checkpoints. resume_from points at a last.ckpt
// written by a previous run of the same config; training continues after its
// recorded epoch and replays to a bitwise-identical end state.
TrainResult train(const RunConfig& cfg, const std::string& resume_from = "");

// Rebuilds the model recorded in a checkpoint header and loads its weights.
Model load_model_checkpoint(const std::string& path, std::string* header_json = nullptr,
                            RunConfig* cfg_out = nullptr);

struct EvalOptions {
    bool gt_as_pred = false;       // oracle bypass: score the label against itself
    std::string per_image_csv;     // optional per-tile breakdown
    int threads = 0;               // 0 -> CHANGEDET_EVAL_THREADS env var, else 1
};

// Global confusion counts over all items, merged in manifest order.
MetricsReport evaluate_model(const Model& model, const std::vector<ManifestItem>& items,
                             const EvalOptions& opt = {});

// Validation-IoU curves from one or more history.csv files.
struct HistorySeries {
    std::string run;
    std::vector<int> epochs;
    std::vector<double> val_iou;
};
HistorySeries read_history(const std::string& path);  // malformed row -> error with line number
void write_curves_csv(const std::vector<HistorySeries>& runs, const std::string& path);
void write_curves_svg(const std::vector<HistorySeries>& runs, const std::string& path);

}  // namespace cd

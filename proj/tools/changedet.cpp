#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "changedet/train.hpp"

namespace {

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

double parse_num(const std::string& s, const std::string& where) {
    size_t used = 0;
    double x = 0;
    try {
        x = std::stod(s, &used);
    } catch (const std::exception&) {
        throw std::runtime_error(where + ": not a number: '" + s + "'");
    }
    if (used != s.size()) throw std::runtime_error(where + ": not a number: '" + s + "'");
    return x;
}

int run_audit(const std::string& path, int default_decimals) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::string line;
    int lineno = 0;
    int col_method = -1, col_dataset = -1, col_f1 = -1, col_iou = -1, col_dec = -1;
    std::printf("%-14s %-10s %-8s %-8s %s\n", "method", "dataset", "f1", "iou", "verdict");
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto fields = split_csv(line);
        if (lineno == 1) {
            for (int i = 0; i < static_cast<int>(fields.size()); ++i) {
                if (fields[static_cast<size_t>(i)] == "method") col_method = i;
                if (fields[static_cast<size_t>(i)] == "dataset") col_dataset = i;
                if (fields[static_cast<size_t>(i)] == "f1") col_f1 = i;
                if (fields[static_cast<size_t>(i)] == "iou") col_iou = i;
                if (fields[static_cast<size_t>(i)] == "decimals") col_dec = i;
            }
            if (col_f1 < 0)
                throw std::runtime_error(path + ":1: header must name an 'f1' column");
            continue;
        }
        auto cell = [&](int c) -> std::string {
            if (c < 0 || c >= static_cast<int>(fields.size())) return "";
            return fields[static_cast<size_t>(c)];
        };
        const std::string where = path + ":" + std::to_string(lineno);
        const std::string method = cell(col_method), dataset = cell(col_dataset);
        const std::string f1s = cell(col_f1), ious = cell(col_iou), decs = cell(col_dec);
        if (f1s.empty() || ious.empty()) {
            std::printf("%-14s %-10s %-8s %-8s insufficient data\n", method.c_str(),
                        dataset.c_str(), f1s.empty() ? "-" : f1s.c_str(),
                        ious.empty() ? "-" : ious.c_str());
            continue;
        }
        const double f1 = parse_num(f1s, where);
        const double iou = parse_num(ious, where);
        int dec = default_decimals;
        if (!decs.empty()) dec = static_cast<int>(parse_num(decs, where));
        cd::AuditResult ar = cd::audit_consistency(f1, iou, dec);
        std::printf("%-14s %-10s %-8s %-8s %s (IoU-implied F1 in [%.7f, %.7f))\n", method.c_str(),
                    dataset.c_str(), f1s.c_str(), ious.c_str(),
                    ar.consistent ? "consistent" : "inconsistent", ar.f1_lo, ar.f1_hi);
    }
    if (lineno == 0) throw std::runtime_error(path + ": empty file");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"bi-temporal change detection: train, evaluate, synthesize, audit, plot"};
    app.require_subcommand(1);

    // train
    auto* t = app.add_subcommand("train", "train a model and write history + checkpoints");
    std::string t_config, t_resume, t_out, t_root, t_train_split, t_val_split, t_core;
    uint64_t t_seed = 0, t_synth_seed = 0;
    int t_epochs = 0, t_batch = 0, t_freeze = 0, t_queries = 0, t_layers = 0, t_embed = 0;
    int t_dec_heads = 0, t_heads = 0, t_points = 0, t_synth_train = 0, t_synth_val = 0;
    int t_synth_size = 0, t_base_shapes = 0, t_change_shapes = 0, t_ckpt_every = 0;
    double t_lr = 0, t_wd = 0, t_elm = 0, t_warmup = 0, t_offset_init = 0, t_mask_thr = 0;
    double t_lset = 0, t_lpix = 0, t_noobj = 0, t_wbg = 0, t_wchg = 0;
    double t_soffset = 0, t_sbright = 0, t_snoise = 0;
    bool t_augment = true, t_lsa = false, t_autow = true;
    std::vector<int> t_widths, t_depths;
    t->add_option("--config", t_config, "run-config JSON file (flags override it)");
    t->add_option("--resume", t_resume, "resume from a last.ckpt");
    t->add_option("--out-dir", t_out, "output directory");
    t->add_option("--seed", t_seed, "training seed");
    t->add_option("--epochs", t_epochs, "number of epochs");
    t->add_option("--batch-size", t_batch, "batch size");
    t->add_option("--base-lr", t_lr, "base learning rate");
    t->add_option("--weight-decay", t_wd, "decoupled weight decay");
    t->add_option("--encoder-lr-mult", t_elm, "encoder LR multiplier in (0,1]");
    t->add_option("--freeze-encoder-epochs", t_freeze, "epochs with a frozen encoder");
    t->add_option("--warmup-frac", t_warmup, "linear warmup fraction of total steps");
    t->add_flag("--augment,!--no-augment", t_augment, "dihedral train-time augmentation");
    t->add_option("--fusion-core", t_core, "attention core: deform | cross")
        ->check(CLI::IsMember({"deform", "cross"}));
    t->add_option("--heads", t_heads, "interaction attention heads");
    t->add_option("--points", t_points, "deformable sampling points per head");
    t->add_option("--offset-init-scale", t_offset_init, "offset-predictor init std (0 = zero)");
    t->add_option("--widths", t_widths, "backbone stage widths")->expected(4);
    t->add_option("--depths", t_depths, "backbone stage depths")->expected(4);
    t->add_option("--queries", t_queries, "decoder query count");
    t->add_option("--dec-layers", t_layers, "decoder layers");
    t->add_option("--embed-dim", t_embed, "decoder embedding dim");
    t->add_option("--dec-heads", t_dec_heads, "decoder attention heads");
    t->add_option("--mask-threshold", t_mask_thr, "masked-attention admit threshold");
    t->add_flag("--log-softmax-agg", t_lsa, "aggregate log-softmax class scores");
    t->add_option("--lambda-set", t_lset, "set-loss weight");
    t->add_option("--lambda-pixel", t_lpix, "pixel-CE weight");
    t->add_option("--noobj-weight", t_noobj, "no-object class down-weight");
    t->add_flag("--auto-pixel-weights,!--fixed-pixel-weights", t_autow,
                "inverse-frequency pixel CE weights");
    t->add_option("--w-bg", t_wbg, "fixed background CE weight");
    t->add_option("--w-chg", t_wchg, "fixed change CE weight");
    t->add_option("--data-root", t_root, "dataset root (expects <root>/<split>/{A,B,label})");
    t->add_option("--train-split", t_train_split, "training split name");
    t->add_option("--val-split", t_val_split, "validation split name");
    t->add_option("--synth-train", t_synth_train, "synthetic training pairs (no --data-root)");
    t->add_option("--synth-val", t_synth_val, "synthetic validation pairs");
    t->add_option("--synth-seed", t_synth_seed, "synthetic scene seed");
    t->add_option("--synth-size", t_synth_size, "synthetic image side");
    t->add_option("--synth-base-shapes", t_base_shapes, "shapes in the base scene");
    t->add_option("--synth-change-shapes", t_change_shapes, "shapes added/removed");
    t->add_option("--synth-offset", t_soffset, "max co-registration offset, px");
    t->add_option("--synth-brightness", t_sbright, "post-image brightness jitter");
    t->add_option("--synth-noise", t_snoise, "additive Gaussian noise sigma");
    t->add_option("--checkpoint-every", t_ckpt_every, "extra epoch checkpoints every k epochs");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    std::string e_ckpt, e_root, e_split = "test", e_csv;
    bool e_gt = false;
    int e_threads = 0;
    ev->add_option("--checkpoint", e_ckpt, "checkpoint path")->required();
    ev->add_option("--data-root", e_root, "dataset root")->required();
    ev->add_option("--split", e_split, "split name (default test)");
    ev->add_option("--per-image", e_csv, "write per-tile metrics CSV");
    ev->add_flag("--gt-as-pred", e_gt, "oracle bypass: score labels against themselves");
    ev->add_option("--threads", e_threads, "shard count (default CHANGEDET_EVAL_THREADS or 1)");

    // synth
    auto* sy = app.add_subcommand("synth", "generate a synthetic bi-temporal dataset");
    std::string s_out;
    int s_n = 0;
    cd::SynthConfig s_cfg;
    sy->add_option("--out", s_out, "output split directory (A/B/label created inside)")
        ->required();
    sy->add_option("--n", s_n, "number of pairs")->required();
    sy->add_option("--seed", s_cfg.seed, "scene seed for the first pair");
    sy->add_option("--height", s_cfg.height, "image height");
    sy->add_option("--width", s_cfg.width, "image width");
    sy->add_option("--base-shapes", s_cfg.n_base_shapes, "shapes in the base scene");
    sy->add_option("--change-shapes", s_cfg.n_change_shapes, "shapes added/removed");
    sy->add_option("--max-offset", s_cfg.max_offset_px, "max co-registration offset, px");
    sy->add_option("--brightness", s_cfg.brightness_jitter, "post-image brightness jitter");
    sy->add_option("--noise", s_cfg.noise_sigma, "additive Gaussian noise sigma");
    sy->add_flag("!--no-rectangles", s_cfg.use_rectangles, "disable rectangles");
    sy->add_flag("!--no-ellipses", s_cfg.use_ellipses, "disable ellipses");

    // audit
    auto* au = app.add_subcommand("audit", "check reported F1/IoU pairs for rounding consistency");
    std::string a_csv;
    int a_dec = 3;
    au->add_option("csv", a_csv, "CSV with columns method,dataset,f1,iou[,decimals]")->required();
    au->add_option("--decimals", a_dec, "decimals assumed when the CSV has no decimals column");

    // curves
    auto* cu = app.add_subcommand("curves", "merge history files into a long CSV and an SVG");
    std::vector<std::string> c_files;
    std::string c_out = "curves";
    cu->add_option("history", c_files, "history.csv files")->required()->expected(-1);
    cu->add_option("--out", c_out, "output prefix (<out>.csv, <out>.svg)");

    try {
        app.parse(argc, argv);

        if (*t) {
            cd::RunConfig cfg;
            if (!t_config.empty()) cfg = cd::load_run_config(t_config);
            if (t->count("--out-dir")) cfg.io.out_dir = t_out;
            if (t->count("--seed")) cfg.optim.seed = t_seed;
            if (t->count("--epochs")) cfg.optim.epochs = t_epochs;
            if (t->count("--batch-size")) cfg.optim.batch_size = t_batch;
            if (t->count("--base-lr")) cfg.optim.base_lr = t_lr;
            if (t->count("--weight-decay")) cfg.optim.weight_decay = t_wd;
            if (t->count("--encoder-lr-mult")) cfg.optim.encoder_lr_mult = t_elm;
            if (t->count("--freeze-encoder-epochs")) cfg.optim.freeze_encoder_epochs = t_freeze;
            if (t->count("--warmup-frac")) cfg.optim.warmup_frac = t_warmup;
            if (t->count("--augment") || t->count("--no-augment")) cfg.optim.augment = t_augment;
            if (t->count("--fusion-core")) cfg.model.interaction.core = t_core;
            if (t->count("--heads")) cfg.model.interaction.heads = t_heads;
            if (t->count("--points")) cfg.model.interaction.points = t_points;
            if (t->count("--offset-init-scale"))
                cfg.model.interaction.offset_init_scale = t_offset_init;
            if (t->count("--widths"))
                for (int i = 0; i < 4; ++i) cfg.model.backbone.widths[i] = t_widths[i];
            if (t->count("--depths"))
                for (int i = 0; i < 4; ++i) cfg.model.backbone.depths[i] = t_depths[i];
            if (t->count("--queries")) cfg.model.decoder.num_queries = t_queries;
            if (t->count("--dec-layers")) cfg.model.decoder.layers = t_layers;
            if (t->count("--embed-dim")) cfg.model.decoder.embed_dim = t_embed;
            if (t->count("--dec-heads")) cfg.model.decoder.heads = t_dec_heads;
            if (t->count("--mask-threshold")) cfg.model.decoder.mask_threshold = t_mask_thr;
            if (t->count("--log-softmax-agg")) cfg.model.decoder.log_softmax_agg = t_lsa;
            if (t->count("--lambda-set")) cfg.loss.lambda_set = t_lset;
            if (t->count("--lambda-pixel")) cfg.loss.lambda_pixel = t_lpix;
            if (t->count("--noobj-weight")) cfg.loss.noobj_class_weight = t_noobj;
            if (t->count("--auto-pixel-weights") || t->count("--fixed-pixel-weights"))
                cfg.loss.auto_pixel_weights = t_autow;
            if (t->count("--w-bg")) cfg.loss.w_bg = t_wbg;
            if (t->count("--w-chg")) cfg.loss.w_chg = t_wchg;
            if (t->count("--data-root")) cfg.data.root = t_root;
            if (t->count("--train-split")) cfg.data.train_split = t_train_split;
            if (t->count("--val-split")) cfg.data.val_split = t_val_split;
            if (t->count("--synth-train")) cfg.data.synth_train = t_synth_train;
            if (t->count("--synth-val")) cfg.data.synth_val = t_synth_val;
            if (t->count("--synth-seed")) cfg.data.synth.seed = t_synth_seed;
            if (t->count("--synth-size")) {
                cfg.data.synth.height = t_synth_size;
                cfg.data.synth.width = t_synth_size;
            }
            if (t->count("--synth-base-shapes")) cfg.data.synth.n_base_shapes = t_base_shapes;
            if (t->count("--synth-change-shapes"))
                cfg.data.synth.n_change_shapes = t_change_shapes;
            if (t->count("--synth-offset")) cfg.data.synth.max_offset_px = t_soffset;
            if (t->count("--synth-brightness")) cfg.data.synth.brightness_jitter = t_sbright;
            if (t->count("--synth-noise")) cfg.data.synth.noise_sigma = t_snoise;
            if (t->count("--checkpoint-every")) cfg.io.checkpoint_every = t_ckpt_every;

            cd::TrainResult res = cd::train(cfg, t_resume);
            std::printf("done: best val IoU %.6f\n", res.best_val_iou);
            std::printf("history: %s\nbest: %s\nlast: %s\nconfig: %s\n", res.history_csv.c_str(),
                        res.best_ckpt.c_str(), res.last_ckpt.c_str(), res.config_json.c_str());
        } else if (*ev) {
            cd::Model model = cd::load_model_checkpoint(e_ckpt);
            cd::DatasetManifest man = cd::load_manifest(e_root, e_split);
            cd::EvalOptions opt;
            opt.gt_as_pred = e_gt;
            opt.per_image_csv = e_csv;
            opt.threads = e_threads;
            cd::MetricsReport r = cd::evaluate_model(model, man.items, opt);
            std::printf("items=%zu tp=%lld fp=%lld fn=%lld tn=%lld\n", man.items.size(),
                        static_cast<long long>(r.counts.tp), static_cast<long long>(r.counts.fp),
                        static_cast<long long>(r.counts.fn), static_cast<long long>(r.counts.tn));
            std::printf("F1=%.17g IoU=%.17g OA=%.17g\n", r.f1, r.iou, r.oa);
        } else if (*sy) {
            cd::DatasetManifest man = cd::generate_dataset(s_cfg, s_n, s_out);
            std::printf("wrote %zu pairs to %s (seed=%llu)\n", man.items.size(), s_out.c_str(),
                        static_cast<unsigned long long>(s_cfg.seed));
        } else if (*au) {
            return run_audit(a_csv, a_dec);
        } else if (*cu) {
            std::vector<cd::HistorySeries> runs;
            for (const auto& p : c_files) runs.push_back(cd::read_history(p));
            cd::write_curves_csv(runs, c_out + ".csv");
            cd::write_curves_svg(runs, c_out + ".svg");
            std::printf("wrote %s.csv and %s.svg (%zu runs)\n", c_out.c_str(), c_out.c_str(),
                        runs.size());
        }
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << e.what() << "\n";
        return 1;
    } catch (const cd::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const cd::TrainAbort& e) {
        std::cerr << "training aborted: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

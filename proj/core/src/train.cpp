#include "changedet/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace fs = std::filesystem;
using njson = nlohmann::ordered_json;

namespace cd {

using ops::add;
using ops::smul;

namespace {

void check_keys(const njson& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError("config section '" + where + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed)
            if (it.key() == k) {
                ok = true;
                break;
            }
        if (!ok) throw ConfigError("unknown config key: " + where + "." + it.key());
    }
}

template <class T>
void take(const njson& j, const std::string& where, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const njson::exception&) {
        throw ConfigError("bad value for config key " + where + "." + key);
    }
}

void parse_backbone(const njson& j, BackboneConfig& c) {
    check_keys(j, "model.backbone", {"widths", "depths", "in_channels", "ln_eps"});
    take(j, "model.backbone", "widths", c.widths);
    take(j, "model.backbone", "depths", c.depths);
    take(j, "model.backbone", "in_channels", c.in_channels);
    take(j, "model.backbone", "ln_eps", c.ln_eps);
}

void parse_interaction(const njson& j, InteractionConfig& c) {
    check_keys(j, "model.interaction", {"core", "heads", "points", "offset_init_scale"});
    take(j, "model.interaction", "core", c.core);
    take(j, "model.interaction", "heads", c.heads);
    take(j, "model.interaction", "points", c.points);
    take(j, "model.interaction", "offset_init_scale", c.offset_init_scale);
}

void parse_decoder(const njson& j, DecoderConfig& c) {
    check_keys(j, "model.decoder",
               {"num_queries", "layers", "embed_dim", "heads", "mask_threshold",
                "log_softmax_agg", "ln_eps"});
    take(j, "model.decoder", "num_queries", c.num_queries);
    take(j, "model.decoder", "layers", c.layers);
    take(j, "model.decoder", "embed_dim", c.embed_dim);
    take(j, "model.decoder", "heads", c.heads);
    take(j, "model.decoder", "mask_threshold", c.mask_threshold);
    take(j, "model.decoder", "log_softmax_agg", c.log_softmax_agg);
    take(j, "model.decoder", "ln_eps", c.ln_eps);
}

void parse_loss(const njson& j, LossConfig& c) {
    check_keys(j, "loss",
               {"lambda_set", "lambda_pixel", "class_cost", "mask_bce_cost", "dice_cost",
                "class_w", "bce_w", "dice_w", "noobj_class_weight", "auto_pixel_weights", "w_bg",
                "w_chg", "dice_eps"});
    take(j, "loss", "lambda_set", c.lambda_set);
    take(j, "loss", "lambda_pixel", c.lambda_pixel);
    take(j, "loss", "class_cost", c.class_cost);
    take(j, "loss", "mask_bce_cost", c.mask_bce_cost);
    take(j, "loss", "dice_cost", c.dice_cost);
    take(j, "loss", "class_w", c.class_w);
    take(j, "loss", "bce_w", c.bce_w);
    take(j, "loss", "dice_w", c.dice_w);
    take(j, "loss", "noobj_class_weight", c.noobj_class_weight);
    take(j, "loss", "auto_pixel_weights", c.auto_pixel_weights);
    take(j, "loss", "w_bg", c.w_bg);
    take(j, "loss", "w_chg", c.w_chg);
    take(j, "loss", "dice_eps", c.dice_eps);
}

void parse_optim(const njson& j, OptimConfig& c) {
    check_keys(j, "optim",
               {"base_lr", "weight_decay", "encoder_lr_mult", "freeze_encoder_epochs", "epochs",
                "batch_size", "seed", "warmup_frac", "augment"});
    take(j, "optim", "base_lr", c.base_lr);
    take(j, "optim", "weight_decay", c.weight_decay);
    take(j, "optim", "encoder_lr_mult", c.encoder_lr_mult);
    take(j, "optim", "freeze_encoder_epochs", c.freeze_encoder_epochs);
    take(j, "optim", "epochs", c.epochs);
    take(j, "optim", "batch_size", c.batch_size);
    take(j, "optim", "seed", c.seed);
    take(j, "optim", "warmup_frac", c.warmup_frac);
    take(j, "optim", "augment", c.augment);
}

void parse_synth(const njson& j, SynthConfig& c) {
    check_keys(j, "data.synth",
               {"height", "width", "n_base_shapes", "n_change_shapes", "max_offset_px",
                "brightness_jitter", "noise_sigma", "use_rectangles", "use_ellipses", "seed"});
    take(j, "data.synth", "height", c.height);
    take(j, "data.synth", "width", c.width);
    take(j, "data.synth", "n_base_shapes", c.n_base_shapes);
    take(j, "data.synth", "n_change_shapes", c.n_change_shapes);
    take(j, "data.synth", "max_offset_px", c.max_offset_px);
    take(j, "data.synth", "brightness_jitter", c.brightness_jitter);
    take(j, "data.synth", "noise_sigma", c.noise_sigma);
    take(j, "data.synth", "use_rectangles", c.use_rectangles);
    take(j, "data.synth", "use_ellipses", c.use_ellipses);
    take(j, "data.synth", "seed", c.seed);
}

void parse_data(const njson& j, DataConfig& c) {
    check_keys(j, "data",
               {"root", "train_split", "val_split", "synth", "synth_train", "synth_val"});
    take(j, "data", "root", c.root);
    take(j, "data", "train_split", c.train_split);
    take(j, "data", "val_split", c.val_split);
    if (j.contains("synth")) parse_synth(j.at("synth"), c.synth);
    take(j, "data", "synth_train", c.synth_train);
    take(j, "data", "synth_val", c.synth_val);
}

void parse_io(const njson& j, IoConfig& c) {
    check_keys(j, "io", {"out_dir", "checkpoint_every"});
    take(j, "io", "out_dir", c.out_dir);
    take(j, "io", "checkpoint_every", c.checkpoint_every);
}

njson json_of(const RunConfig& c) {
    njson j;
    j["model"]["backbone"] = {{"widths", c.model.backbone.widths},
                              {"depths", c.model.backbone.depths},
                              {"in_channels", c.model.backbone.in_channels},
                              {"ln_eps", c.model.backbone.ln_eps}};
    j["model"]["interaction"] = {{"core", c.model.interaction.core},
                                 {"heads", c.model.interaction.heads},
                                 {"points", c.model.interaction.points},
                                 {"offset_init_scale", c.model.interaction.offset_init_scale}};
    j["model"]["decoder"] = {{"num_queries", c.model.decoder.num_queries},
                             {"layers", c.model.decoder.layers},
                             {"embed_dim", c.model.decoder.embed_dim},
                             {"heads", c.model.decoder.heads},
                             {"mask_threshold", c.model.decoder.mask_threshold},
                             {"log_softmax_agg", c.model.decoder.log_softmax_agg},
                             {"ln_eps", c.model.decoder.ln_eps}};
    j["loss"] = {{"lambda_set", c.loss.lambda_set},
                 {"lambda_pixel", c.loss.lambda_pixel},
                 {"class_cost", c.loss.class_cost},
                 {"mask_bce_cost", c.loss.mask_bce_cost},
                 {"dice_cost", c.loss.dice_cost},
                 {"class_w", c.loss.class_w},
                 {"bce_w", c.loss.bce_w},
                 {"dice_w", c.loss.dice_w},
                 {"noobj_class_weight", c.loss.noobj_class_weight},
                 {"auto_pixel_weights", c.loss.auto_pixel_weights},
                 {"w_bg", c.loss.w_bg},
                 {"w_chg", c.loss.w_chg},
                 {"dice_eps", c.loss.dice_eps}};
    j["optim"] = {{"base_lr", c.optim.base_lr},
                  {"weight_decay", c.optim.weight_decay},
                  {"encoder_lr_mult", c.optim.encoder_lr_mult},
                  {"freeze_encoder_epochs", c.optim.freeze_encoder_epochs},
                  {"epochs", c.optim.epochs},
                  {"batch_size", c.optim.batch_size},
                  {"seed", c.optim.seed},
                  {"warmup_frac", c.optim.warmup_frac},
                  {"augment", c.optim.augment}};
    j["data"] = {{"root", c.data.root},
                 {"train_split", c.data.train_split},
                 {"val_split", c.data.val_split},
                 {"synth",
                  {{"height", c.data.synth.height},
                   {"width", c.data.synth.width},
                   {"n_base_shapes", c.data.synth.n_base_shapes},
                   {"n_change_shapes", c.data.synth.n_change_shapes},
                   {"max_offset_px", c.data.synth.max_offset_px},
                   {"brightness_jitter", c.data.synth.brightness_jitter},
                   {"noise_sigma", c.data.synth.noise_sigma},
                   {"use_rectangles", c.data.synth.use_rectangles},
                   {"use_ellipses", c.data.synth.use_ellipses},
                   {"seed", c.data.synth.seed}}},
                 {"synth_train", c.data.synth_train},
                 {"synth_val", c.data.synth_val}};
    j["io"] = {{"out_dir", c.io.out_dir}, {"checkpoint_every", c.io.checkpoint_every}};
    return j;
}

RunConfig parse_json_obj(const njson& j) {
    RunConfig c;
    check_keys(j, "(root)", {"model", "loss", "optim", "data", "io"});
    if (j.contains("model")) {
        const njson& m = j.at("model");
        check_keys(m, "model", {"backbone", "interaction", "decoder"});
        if (m.contains("backbone")) parse_backbone(m.at("backbone"), c.model.backbone);
        if (m.contains("interaction")) parse_interaction(m.at("interaction"), c.model.interaction);
        if (m.contains("decoder")) parse_decoder(m.at("decoder"), c.model.decoder);
    }
    if (j.contains("loss")) parse_loss(j.at("loss"), c.loss);
    if (j.contains("optim")) parse_optim(j.at("optim"), c.optim);
    if (j.contains("data")) parse_data(j.at("data"), c.data);
    if (j.contains("io")) parse_io(j.at("io"), c.io);
    return c;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw std::runtime_error("short write: " + path);
}

std::string g17(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

std::vector<NamedTensor> param_tensors(const ParamStore& store) {
    std::vector<NamedTensor> out;
    out.reserve(store.names.size());
    for (const auto& n : store.names) out.push_back({n, store.by_name.at(n)->val});
    return out;
}

std::string ckpt_header(const RunConfig& cfg, const char* kind, int epoch, double val_iou,
                        double best_iou) {
    njson h;
    h["format_version"] = 1;
    h["kind"] = kind;
    h["epoch"] = epoch;
    h["val_iou"] = val_iou;
    h["best_val_iou"] = best_iou;
    h["config"] = json_of(cfg);
    return h.dump();
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
    njson j;
    try {
        j = njson::parse(json_text);
    } catch (const njson::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return parse_json_obj(j);
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_run_config(ss.str());
}

std::string run_config_json(const RunConfig& cfg) { return json_of(cfg).dump(2) + "\n"; }

void validate_run_config(const RunConfig& cfg) {
    const OptimConfig& o = cfg.optim;
    if (!(o.encoder_lr_mult > 0.0 && o.encoder_lr_mult <= 1.0))
        throw ConfigError("optim.encoder_lr_mult must be in (0, 1]");
    if (o.epochs < 1) throw ConfigError("optim.epochs must be >= 1");
    if (o.batch_size < 1) throw ConfigError("optim.batch_size must be >= 1");
    if (!(o.base_lr > 0.0)) throw ConfigError("optim.base_lr must be > 0");
    if (o.weight_decay < 0.0) throw ConfigError("optim.weight_decay must be >= 0");
    if (o.freeze_encoder_epochs < 0) throw ConfigError("optim.freeze_encoder_epochs must be >= 0");
    if (!(o.warmup_frac >= 0.0 && o.warmup_frac < 1.0))
        throw ConfigError("optim.warmup_frac must be in [0, 1)");
    if (cfg.loss.lambda_set < 0.0 || cfg.loss.lambda_pixel < 0.0)
        throw ConfigError("loss.lambda_set and loss.lambda_pixel must be >= 0");
    if (cfg.loss.lambda_set == 0.0 && cfg.loss.lambda_pixel == 0.0)
        throw ConfigError("loss: at least one of lambda_set, lambda_pixel must be positive");
    if (cfg.data.root.empty() && (cfg.data.synth_train < 1 || cfg.data.synth_val < 1))
        throw ConfigError("data.synth_train and data.synth_val must be >= 1 for synthetic runs");
    if (cfg.io.checkpoint_every < 0) throw ConfigError("io.checkpoint_every must be >= 0");
    if (cfg.io.out_dir.empty()) throw ConfigError("io.out_dir must be set");
}

Model load_model_checkpoint(const std::string& path, std::string* header_json,
                            RunConfig* cfg_out) {
    std::vector<NamedTensor> tensors;
    std::string header = load_checkpoint(path, tensors);
    njson h;
    try {
        h = njson::parse(header);
    } catch (const njson::exception& e) {
        throw std::runtime_error(path + ": bad checkpoint header: " + e.what());
    }
    if (!h.contains("config")) throw std::runtime_error(path + ": checkpoint header has no config");
    RunConfig cfg = parse_json_obj(h.at("config"));
    Model model;
    model.build(cfg.model, cfg.optim.seed);
    std::vector<NamedTensor> weights;
    for (auto& nt : tensors)
        if (nt.name.rfind("adam.", 0) != 0) weights.push_back(std::move(nt));
    std::vector<std::string> warnings;
    apply_tensors(model.params(), weights, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
    if (header_json) *header_json = header;
    if (cfg_out) *cfg_out = cfg;
    return model;
}

MetricsReport evaluate_model(const Model& model, const std::vector<ManifestItem>& items,
                             const EvalOptions& opt) {
    if (items.empty()) throw std::runtime_error("evaluate: no items");
    int threads = opt.threads;
    if (threads <= 0) {
        threads = 1;
        if (const char* env = std::getenv("CHANGEDET_EVAL_THREADS")) {
            threads = std::atoi(env);
            if (threads < 1) threads = 1;
        }
    }
    const size_t n = items.size();
    threads = static_cast<int>(std::min<size_t>(static_cast<size_t>(threads), n));

    std::vector<ConfusionCounts> per_item(n);
    auto work = [&](size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i) {
            LoadedPair p = load_pair(items[i]);
            Mask pred = opt.gt_as_pred ? p.gt : model.predict(p.pre, p.post);
            accumulate(pred, p.gt, per_item[i]);
        }
    };
    if (threads <= 1) {
        work(0, n);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errs(static_cast<size_t>(threads));
        for (int t = 0; t < threads; ++t) {
            const size_t lo = n * static_cast<size_t>(t) / static_cast<size_t>(threads);
            const size_t hi = n * static_cast<size_t>(t + 1) / static_cast<size_t>(threads);
            pool.emplace_back([&, t, lo, hi] {
                try {
                    work(lo, hi);
                } catch (...) {
                    errs[static_cast<size_t>(t)] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errs)
            if (e) std::rethrow_exception(e);
    }

    // merge in manifest order; integer sums make the result thread-count invariant
    ConfusionCounts total;
    for (const auto& c : per_item) total += c;

    if (!opt.per_image_csv.empty()) {
        std::ostringstream csv;
        csv << "name,tp,fp,fn,tn,f1,iou,oa\n";
        for (size_t i = 0; i < n; ++i) {
            MetricsReport r = report(per_item[i]);
            csv << items[i].name << "," << per_item[i].tp << "," << per_item[i].fp << ","
                << per_item[i].fn << "," << per_item[i].tn << "," << g17(r.f1) << "," << g17(r.iou)
                << "," << g17(r.oa) << "\n";
        }
        write_text_file(opt.per_image_csv, csv.str());
    }
    return report(total);
}

TrainResult train(const RunConfig& cfg_in, const std::string& resume_from) {
    RunConfig cfg = cfg_in;
    validate_run_config(cfg);
    fs::create_directories(cfg.io.out_dir);

    DatasetManifest train_m, val_m;
    if (cfg.data.root.empty()) {
        const std::string sroot = (fs::path(cfg.io.out_dir) / "synth").string();
        SynthConfig sc = cfg.data.synth;
        train_m = generate_dataset(sc, cfg.data.synth_train, (fs::path(sroot) / "train").string());
        SynthConfig vc = sc;
        vc.seed = sc.seed + static_cast<uint64_t>(cfg.data.synth_train);
        val_m = generate_dataset(vc, cfg.data.synth_val, (fs::path(sroot) / "val").string());
    } else {
        train_m = load_manifest(cfg.data.root, cfg.data.train_split);
        val_m = load_manifest(cfg.data.root, cfg.data.val_split);
    }
    if (train_m.items.empty()) throw ConfigError("training split has no items");
    if (val_m.items.empty()) throw ConfigError("validation split has no items");

    Model model;
    model.build(cfg.model, cfg.optim.seed);
    AdamW opt;
    opt.weight_decay = cfg.optim.weight_decay;
    opt.encoder_lr_mult = cfg.optim.encoder_lr_mult;
    opt.init(model.params());

    int done_epochs = 0;
    double best_iou = -1.0;
    if (!resume_from.empty()) {
        std::vector<NamedTensor> tensors;
        std::string header = load_checkpoint(resume_from, tensors);
        njson h = njson::parse(header);
        if (h.value("kind", "") != std::string("last"))
            throw std::runtime_error("resume expects a last.ckpt (kind \"last\"), got \"" +
                                     h.value("kind", "") + "\"");
        done_epochs = h.value("epoch", 0);
        best_iou = h.value("best_val_iou", -1.0);
        std::vector<NamedTensor> weights;
        for (auto& nt : tensors)
            if (nt.name.rfind("adam.", 0) != 0) weights.push_back(nt);
        std::vector<std::string> warnings;
        apply_tensors(model.params(), weights, &warnings);
        for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
        opt.import_state(model.params(), tensors);
        if (done_epochs >= cfg.optim.epochs)
            throw ConfigError("resume checkpoint already covers all configured epochs");
    }

    const std::string cfg_path = (fs::path(cfg.io.out_dir) / "config.json").string();
    write_text_file(cfg_path, run_config_json(cfg));

    const std::string hist_path = (fs::path(cfg.io.out_dir) / "history.csv").string();
    std::ofstream hist(hist_path, done_epochs == 0
                                      ? (std::ios::binary | std::ios::trunc)
                                      : (std::ios::binary | std::ios::app));
    if (!hist) throw std::runtime_error("cannot write " + hist_path);
    if (done_epochs == 0) hist << "epoch,L_total,L_set,L_pixel,val_F1,val_IoU,val_OA,lr\n";

    const int n_train = static_cast<int>(train_m.items.size());
    const int steps_per_epoch = (n_train + cfg.optim.batch_size - 1) / cfg.optim.batch_size;
    const long long total_steps = 1LL * steps_per_epoch * cfg.optim.epochs;
    const long long warmup_steps =
        std::llround(cfg.optim.warmup_frac * static_cast<double>(total_steps));
    auto lr_at = [&](long long step) {
        if (step < warmup_steps)
            return cfg.optim.base_lr * static_cast<double>(step + 1) /
                   static_cast<double>(warmup_steps);
        return cfg.optim.base_lr;
    };

    std::printf("train: seed=%llu epochs=%d batch=%d train_items=%d val_items=%d params=%lld\n",
                static_cast<unsigned long long>(cfg.optim.seed), cfg.optim.epochs,
                cfg.optim.batch_size, n_train, static_cast<int>(val_m.items.size()),
                static_cast<long long>(model.params().total_params()));
    std::fflush(stdout);

    const std::string best_path = (fs::path(cfg.io.out_dir) / "best.ckpt").string();
    const std::string last_path = (fs::path(cfg.io.out_dir) / "last.ckpt").string();

    for (int e = done_epochs; e < cfg.optim.epochs; ++e) {
        auto batches = make_batches(n_train, cfg.optim.batch_size, mix_seed(cfg.optim.seed, e),
                                    true, cfg.optim.augment);
        const bool freeze = e < cfg.optim.freeze_encoder_epochs;
        double sum_total = 0.0, sum_set = 0.0, sum_pixel = 0.0;
        double lr = cfg.optim.base_lr;
        long long gstep = 1LL * e * steps_per_epoch;
        for (const auto& b : batches) {
            model.params().zero_grad();
            Var batch_loss;
            double bset = 0.0, bpix = 0.0;
            const double inv_b = 1.0 / static_cast<double>(b.indices.size());
            for (size_t k = 0; k < b.indices.size(); ++k) {
                LoadedPair p = load_pair(train_m.items[static_cast<size_t>(b.indices[k])]);
                const int aug = b.augment_ids[k];
                Tensor pre = transform_image(p.pre, aug);
                Tensor post = transform_image(p.post, aug);
                Mask gt = transform_mask(p.gt, aug);
                Model::Output out = model.forward(pre, post);
                TotalLossOut tl;
                try {
                    tl = total_loss(out.queries, out.dense, gt, cfg.loss);
                } catch (const std::invalid_argument& ex) {
                    // a diverged run can surface as non-finite match costs before
                    // the loss value itself does; report it as the same abort
                    if (std::string(ex.what()).find("non-finite") != std::string::npos)
                        throw TrainAbort("non-finite loss at step " + std::to_string(gstep) +
                                         ": " + ex.what());
                    throw;
                }
                batch_loss = batch_loss ? add(batch_loss, tl.total) : tl.total;
                bset += tl.set->val.v[0] * inv_b;
                bpix += tl.pixel->val.v[0] * inv_b;
            }
            Var mean_loss = smul(batch_loss, inv_b);
            const double lt = mean_loss->val.v[0];
            if (!std::isfinite(lt))
                throw TrainAbort("non-finite loss at step " + std::to_string(gstep) +
                                 ": L_total=" + g17(lt) + " L_set=" + g17(bset) +
                                 " L_pixel=" + g17(bpix));
            backward(mean_loss);
            lr = lr_at(gstep);
            opt.step(model.params(), lr, freeze);
            ++gstep;
            sum_total += lt;
            sum_set += bset;
            sum_pixel += bpix;
        }
        const double inv_steps = 1.0 / static_cast<double>(steps_per_epoch);
        const double l_total = sum_total * inv_steps;
        const double l_set = sum_set * inv_steps;
        const double l_pixel = sum_pixel * inv_steps;

        MetricsReport val = evaluate_model(model, val_m.items);

        hist << (e + 1) << "," << g17(l_total) << "," << g17(l_set) << "," << g17(l_pixel) << ","
             << g17(val.f1) << "," << g17(val.iou) << "," << g17(val.oa) << "," << g17(lr) << "\n";
        hist.flush();
        std::printf("epoch %d/%d seed=%llu loss=%.6f set=%.6f pixel=%.6f val_iou=%.4f lr=%.3g%s\n",
                    e + 1, cfg.optim.epochs, static_cast<unsigned long long>(cfg.optim.seed),
                    l_total, l_set, l_pixel, val.iou, lr, freeze ? " (encoder frozen)" : "");
        std::fflush(stdout);

        if (val.iou > best_iou) {
            best_iou = val.iou;
            save_checkpoint(best_path, ckpt_header(cfg, "best", e + 1, val.iou, best_iou),
                            param_tensors(model.params()));
        }
        std::vector<NamedTensor> full = param_tensors(model.params());
        opt.export_state(model.params(), full);
        save_checkpoint(last_path, ckpt_header(cfg, "last", e + 1, val.iou, best_iou), full);
        if (cfg.io.checkpoint_every > 0 && (e + 1) % cfg.io.checkpoint_every == 0) {
            const std::string p =
                (fs::path(cfg.io.out_dir) / ("epoch_" + std::to_string(e + 1) + ".ckpt")).string();
            save_checkpoint(p, ckpt_header(cfg, "epoch", e + 1, val.iou, best_iou),
                            param_tensors(model.params()));
        }
    }

    TrainResult res;
    res.history_csv = hist_path;
    res.best_ckpt = best_path;
    res.last_ckpt = last_path;
    res.config_json = cfg_path;
    res.best_val_iou = best_iou;
    res.epochs_run = cfg.optim.epochs - done_epochs;
    return res;
}

namespace {

std::string run_name_for(const std::string& path) {
    fs::path p(path);
    if (p.filename() == "history.csv") {
        fs::path parent = p.has_parent_path() ? p.parent_path() : fs::path();
        if (!parent.filename().string().empty()) return parent.filename().string();
    }
    return p.stem().string();
}

std::vector<std::string> split_csv_line(const std::string& line) {
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

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace

HistorySeries read_history(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open history file: " + path);
    HistorySeries hs;
    hs.run = run_name_for(path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto fields = split_csv_line(line);
        if (lineno == 1) {
            if (fields.empty() || fields[0] != "epoch")
                throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                         ": expected history header starting with 'epoch'");
            continue;
        }
        if (fields.size() < 8)
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": expected 8 columns, got " +
                                     std::to_string(fields.size()));
        try {
            size_t used = 0;
            int ep = std::stoi(fields[0], &used);
            if (used != fields[0].size()) throw std::invalid_argument("trailing junk");
            double iou = std::stod(fields[5], &used);
            if (used != fields[5].size()) throw std::invalid_argument("trailing junk");
            hs.epochs.push_back(ep);
            hs.val_iou.push_back(iou);
        } catch (const std::exception&) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": malformed history row");
        }
    }
    if (hs.epochs.empty()) throw std::runtime_error(path + ": no data rows");
    return hs;
}

void write_curves_csv(const std::vector<HistorySeries>& runs, const std::string& path) {
    std::ostringstream out;
    out << "run,epoch,val_IoU\n";
    for (const auto& r : runs)
        for (size_t i = 0; i < r.epochs.size(); ++i)
            out << r.run << "," << r.epochs[i] << "," << g17(r.val_iou[i]) << "\n";
    write_text_file(path, out.str());
}

void write_curves_svg(const std::vector<HistorySeries>& runs, const std::string& path) {
    if (runs.empty()) throw std::runtime_error("curves: no runs");
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                    "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"};
    const int W = 760, H = 440;
    const double ml = 62, mr = 180, mt = 24, mb = 48;
    const double pw = W - ml - mr, ph = H - mt - mb;

    int emin = runs[0].epochs[0], emax = emin;
    double vmin = runs[0].val_iou[0], vmax = vmin;
    for (const auto& r : runs)
        for (size_t i = 0; i < r.epochs.size(); ++i) {
            emin = std::min(emin, r.epochs[i]);
            emax = std::max(emax, r.epochs[i]);
            vmin = std::min(vmin, r.val_iou[i]);
            vmax = std::max(vmax, r.val_iou[i]);
        }
    if (emax == emin) emax = emin + 1;
    double span = vmax - vmin;
    if (span <= 0) span = std::max(1e-3, std::abs(vmax) * 0.1 + 1e-3);
    const double ylo = vmin - 0.05 * span, yhi = vmax + 0.05 * span;

    auto px = [&](double e) { return ml + (e - emin) / double(emax - emin) * pw; };
    auto py = [&](double v) { return mt + (yhi - v) / (yhi - ylo) * ph; };

    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
    s << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    char buf[160];

    // axes
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n", ml,
                  mt + ph, ml + pw, mt + ph);
    s << buf;
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n", ml,
                  mt, ml, mt + ph);
    s << buf;

    const int xticks = std::min(8, emax - emin);
    for (int t = 0; t <= xticks; ++t) {
        const double e = emin + (emax - emin) * static_cast<double>(t) / xticks;
        const double x = px(e);
        std::snprintf(buf, sizeof buf,
                      "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n",
                      x, mt + ph, x, mt + ph + 5);
        s << buf;
        std::snprintf(buf, sizeof buf,
                      "<text x=\"%.1f\" y=\"%.1f\" font-size=\"11\" text-anchor=\"middle\" "
                      "font-family=\"sans-serif\">%.4g</text>\n",
                      x, mt + ph + 18, e);
        s << buf;
    }
    for (int t = 0; t <= 5; ++t) {
        const double v = ylo + (yhi - ylo) * static_cast<double>(t) / 5.0;
        const double y = py(v);
        std::snprintf(buf, sizeof buf,
                      "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n",
                      ml - 5, y, ml, y);
        s << buf;
        std::snprintf(buf, sizeof buf,
                      "<text x=\"%.1f\" y=\"%.1f\" font-size=\"11\" text-anchor=\"end\" "
                      "font-family=\"sans-serif\">%.4g</text>\n",
                      ml - 8, y + 4, v);
        s << buf;
    }
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\" text-anchor=\"middle\" "
                  "font-family=\"sans-serif\">epoch</text>\n",
                  ml + pw / 2, mt + ph + 38);
    s << buf;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\" text-anchor=\"middle\" "
                  "font-family=\"sans-serif\" transform=\"rotate(-90 %.1f %.1f)\">val "
                  "IoU</text>\n",
                  18.0, mt + ph / 2, 18.0, mt + ph / 2);
    s << buf;

    for (size_t r = 0; r < runs.size(); ++r) {
        const char* color = palette[r % (sizeof palette / sizeof *palette)];
        s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (size_t i = 0; i < runs[r].epochs.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", i ? " " : "", px(runs[r].epochs[i]),
                          py(runs[r].val_iou[i]));
            s << buf;
        }
        s << "\"/>\n";
        const double ly = mt + 16 + 18 * static_cast<double>(r);
        std::snprintf(buf, sizeof buf,
                      "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"%s\" "
                      "stroke-width=\"1.5\"/>\n",
                      ml + pw + 14, ly, ml + pw + 38, ly, color);
        s << buf;
        std::snprintf(buf, sizeof buf,
                      "<text x=\"%.1f\" y=\"%.1f\" font-size=\"11\" "
                      "font-family=\"sans-serif\">%s</text>\n",
                      ml + pw + 44, ly + 4, xml_escape(runs[r].run).c_str());
        s << buf;
    }
    s << "</svg>\n";
    write_text_file(path, s.str());
}

}  // namespace cd

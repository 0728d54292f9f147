#include "dg/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "dg/error.hpp"
#include "dg/log.hpp"

namespace dg {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

TensorPtr flip_width(const TensorPtr& x) {
    // Mirror the last axis; works for [C,H,W] images and [H,W] masks.
    const auto& shape = x->shape;
    const std::int64_t w = shape.back();
    std::int64_t rows = 1;
    for (std::size_t i = 0; i + 1 < shape.size(); ++i) rows *= shape[i];
    std::vector<double> out(x->data.size());
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < w; ++c)
            out[static_cast<std::size_t>(r * w + c)] =
                x->data[static_cast<std::size_t>(r * w + (w - 1 - c))];
    return Tensor::create(shape, std::move(out));
}

const std::vector<std::size_t>& regime_pool(const TrainingCorpus& corpus, Regime r) {
    return r == Regime::Language ? corpus.language : corpus.sound;
}

// Draws the block of pool positions for `step` from the per-epoch permutation.
std::vector<std::size_t> draw_block(const std::vector<std::size_t>& pool, std::int64_t take,
                                    std::int64_t steps_per_epoch, std::uint64_t seed,
                                    std::int64_t step, const char* label) {
    const std::int64_t epoch = step / steps_per_epoch;
    const std::int64_t offset = (step % steps_per_epoch) * take;
    std::vector<std::size_t> perm = pool;
    Rng rng = Rng(seed).sub("perm").sub(label).fork(static_cast<std::uint64_t>(epoch));
    rng.shuffle(perm);
    return std::vector<std::size_t>(perm.begin() + offset, perm.begin() + offset + take);
}

void apply_augmentations(const TrainingCorpus& corpus, const TrainConfig& t, SamplePair& item,
                         std::size_t id, Rng& rng) {
    if (rng.uniform() < t.flip_prob) {
        item.image = flip_width(item.image);
        const std::int64_t grid = corpus.data.grid();
        for (auto& obj : item.objects) {
            if (obj.mask) obj.mask = flip_width(obj.mask);
            obj.cell_x = grid - 1 - obj.cell_x;
        }
    }
    if (rng.uniform() < t.splice_prob) {
        const auto& pool = regime_pool(corpus, item.regime);
        std::size_t j = static_cast<std::size_t>(rng.uniform_below(pool.size()));
        if (pool[j] == id) j = (j + 1) % pool.size();
        if (pool[j] == id) return; // single-sample pool: no donor available
        const SamplePair& donor = corpus.samples[pool[j]];

        const std::int64_t T = item.clip->shape[1];
        const std::int64_t lo = static_cast<std::int64_t>(
            std::ceil(t.splice_min_frac * static_cast<double>(T)));
        const std::int64_t hi = static_cast<std::int64_t>(
            std::floor(t.splice_max_frac * static_cast<double>(T)));
        const std::int64_t len = rng.uniform_int(lo, hi);
        if (len <= 0 || len > donor.valid_len || len > item.valid_len) return;
        const std::int64_t donor_pos = rng.uniform_int(0, donor.valid_len - len);
        const std::int64_t target_pos = rng.uniform_int(0, item.valid_len - len);

        const std::int64_t C = item.clip->shape[0];
        std::vector<double> seg(static_cast<std::size_t>(C * len));
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t u = 0; u < len; ++u)
                seg[static_cast<std::size_t>(c * len + u)] =
                    donor.clip->data[static_cast<std::size_t>(c * donor.clip->shape[1] +
                                                              donor_pos + u)];
        const std::int64_t ramp = std::min<std::int64_t>(4, len / 2);
        SpliceResult spliced =
            splice_negative(item.clip, Tensor::create({C, len}, std::move(seg)), target_pos, ramp);
        item.clip = spliced.clip;
        for (std::size_t i = 0; i < item.splice_mask.size(); ++i)
            item.splice_mask[i] = std::max(item.splice_mask[i], spliced.mask[i]);
    }
}

std::string non_finite_diagnostic(std::int64_t step, const std::vector<std::size_t>& ids,
                                  const std::string& cause) {
    std::ostringstream os;
    os << "non-finite loss at step " << step << " on batch ids [";
    for (std::size_t i = 0; i < ids.size(); ++i) os << (i ? ", " : "") << ids[i];
    os << "]: " << cause;
    log_error(os.str());
    return os.str();
}

} // namespace

TrainingCorpus load_training_corpus(const std::string& corpus_dir, bool keep_masks) {
    const CorpusManifest manifest = load_manifest(corpus_dir);
    TrainingCorpus corpus;
    corpus.data = data_config_from_json(manifest.config_echo);
    corpus.samples.reserve(manifest.train.size());
    for (const auto& rec : manifest.train) {
        SamplePair s = load_sample((fs::path(corpus_dir) / rec.path).string());
        if (!keep_masks)
            for (auto& obj : s.objects) obj.mask.reset();
        const std::size_t idx = corpus.samples.size();
        (s.regime == Regime::Language ? corpus.language : corpus.sound).push_back(idx);
        corpus.samples.push_back(std::move(s));
    }
    return corpus;
}

std::vector<double> frame_splice_mask(const std::vector<double>& raw, std::int64_t stride) {
    if (stride <= 0) throw InvalidConfig("frame_splice_mask stride must be positive");
    const std::int64_t n = static_cast<std::int64_t>(raw.size());
    const std::int64_t frames = (n + stride - 1) / stride;
    std::vector<double> out(static_cast<std::size_t>(frames), 0.0);
    for (std::int64_t f = 0; f < frames; ++f) {
        const std::int64_t lo = f * stride, hi = std::min(n, lo + stride);
        double acc = 0.0;
        for (std::int64_t i = lo; i < hi; ++i) acc += raw[static_cast<std::size_t>(i)];
        out[static_cast<std::size_t>(f)] = acc / static_cast<double>(hi - lo);
    }
    return out;
}

Batch make_batch(const TrainingCorpus& corpus, const TrainConfig& t, std::uint64_t seed,
                 std::int64_t step) {
    if (step < 0) throw InvalidConfig("negative training step");
    const std::int64_t B = t.batch_size;

    Batch batch;
    if (t.regime == "mixed") {
        const std::int64_t half = B / 2;
        const std::int64_t smaller = static_cast<std::int64_t>(
            std::min(corpus.language.size(), corpus.sound.size()));
        const std::int64_t steps_per_epoch = smaller / half;
        if (steps_per_epoch == 0)
            throw InsufficientSamples("mixed batches need " + std::to_string(half) +
                                      " samples per regime; have " +
                                      std::to_string(corpus.language.size()) + " language and " +
                                      std::to_string(corpus.sound.size()) + " sound");
        auto lang = draw_block(corpus.language, half, steps_per_epoch, seed, step, "language");
        auto sound = draw_block(corpus.sound, half, steps_per_epoch, seed, step, "sound");
        batch.ids = std::move(lang);
        batch.ids.insert(batch.ids.end(), sound.begin(), sound.end());
    } else {
        const Regime r = regime_from_string(t.regime);
        const auto& pool = regime_pool(corpus, r);
        const std::int64_t steps_per_epoch = static_cast<std::int64_t>(pool.size()) / B;
        if (steps_per_epoch == 0)
            throw InsufficientSamples("regime \"" + t.regime + "\" has " +
                                      std::to_string(pool.size()) + " samples; batch needs " +
                                      std::to_string(B));
        batch.ids = draw_block(pool, B, steps_per_epoch, seed, step, t.regime.c_str());
    }

    Rng rng = Rng(seed).sub("augment").fork(static_cast<std::uint64_t>(step));
    for (std::size_t id : batch.ids) {
        SamplePair item = corpus.samples[id];
        apply_augmentations(corpus, t, item, id, rng);
        batch.items.push_back(std::move(item));
    }
    return batch;
}

void adam_step(const std::vector<ModelParams::Named>& params, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
    state.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (const auto& p : params) {
        const std::size_t n = p.value->data.size();
        AdamSlot& slot = state.slots[p.name];
        if (slot.m.empty()) {
            slot.m.assign(n, 0.0);
            slot.v.assign(n, 0.0);
        } else if (slot.m.size() != n) {
            throw ShapeMismatch("optimizer slot for " + p.name + " holds " +
                                std::to_string(slot.m.size()) + " values; parameter has " +
                                std::to_string(n));
        }
        const std::vector<double>& g = p.value->grad;
        if (!g.empty() && g.size() != n)
            throw ShapeMismatch("gradient size mismatch for " + p.name);
        for (std::size_t i = 0; i < n; ++i) {
            const double gi = g.empty() ? 0.0 : g[i];
            slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * gi;
            slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * gi * gi;
            const double mhat = slot.m[i] / bc1;
            const double vhat = slot.v[i] / bc2;
            p.value->data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

double clip_global_norm(const std::vector<ModelParams::Named>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params)
        for (double g : p.value->grad) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (const auto& p : params)
            for (double& g : p.value->grad) g *= scale;
    }
    return norm;
}

std::string step_record_line(const StepRecord& r) {
    const json j{{"step", r.step},
                 {"l_av", r.loss.l_av},
                 {"l_va", r.loss.l_va},
                 {"l_dis", r.loss.l_dis},
                 {"l_splice", r.loss.l_splice},
                 {"l_cal", r.loss.l_cal},
                 {"l_nonneg", r.loss.l_nonneg},
                 {"l_tv", r.loss.l_tv},
                 {"total", r.loss.total},
                 {"gamma", r.loss.gamma}};
    return j.dump();
}

void train_steps(ModelParams& params, AdamState& state, const TrainingCorpus& corpus,
                 const RunConfig& cfg, std::int64_t from, std::int64_t to,
                 std::vector<StepRecord>& records) {
    const TrainConfig& t = cfg.train;
    const LossWeights weights{t.lambda_dis, t.lambda_splice, t.lambda_cal, t.lambda_nonneg,
                              t.lambda_tv};
    const LossFlags flags = LossFlags::from_disable_list(t.disable);
    const std::int64_t stride = ModelConfig::stride_product;

    std::vector<ModelParams::Named> aligner;
    for (const auto& n : params.named)
        if (n.aligner) aligner.push_back(n);

    for (std::int64_t step = from; step < to; ++step) {
        const bool warm = step < t.warmup_steps;
        // Each phase is its own optimization run: fresh moments at the switch.
        if (step == t.warmup_steps) state = AdamState{};
        for (const auto& n : params.named) n.value->requires_grad = !warm || n.aligner;

        const Batch batch = make_batch(corpus, t, cfg.seed, step);
        StepRecord rec;
        rec.step = step;
        try {
            std::vector<BatchPair> pairs;
            pairs.reserve(batch.items.size());
            for (const auto& item : batch.items) {
                const TensorPtr visual = visual_forward(params, item.image);
                const AudioFeatures audio = audio_forward(params, item.clip, item.valid_len);
                pairs.push_back(
                    {audio.features, visual, frame_splice_mask(item.splice_mask, stride)});
            }
            Rng omega_rng = Rng(cfg.seed).sub("omega").fork(static_cast<std::uint64_t>(step));
            rec.loss = total_loss(pairs, params.gamma(), weights, flags, t.omega, omega_rng,
                                  cfg.model.head_pool);
        } catch (const NonFiniteLoss& e) {
            throw NonFiniteLoss(non_finite_diagnostic(step, batch.ids, e.what()));
        } catch (const NonFiniteScores& e) {
            throw NonFiniteLoss(non_finite_diagnostic(step, batch.ids, e.what()));
        }

        for (const auto& n : params.named) n.value->zero_grad();
        backward(rec.loss.total_tensor);

        const auto& active = warm ? aligner : params.named;
        rec.grad_norm = clip_global_norm(active, t.clip_norm);
        if (t.clip_norm > 0.0 && rec.grad_norm > t.clip_norm)
            log_debug("step " + std::to_string(step) + ": clipped gradient norm " +
                      std::to_string(rec.grad_norm) + " to " + std::to_string(t.clip_norm));
        adam_step(active, state, warm ? t.lr_warmup : t.lr_full, t.beta1, t.beta2, t.adam_eps);
        rec.loss.total_tensor.reset(); // drop the step's graph; records keep numbers only
        records.push_back(std::move(rec));
    }
    for (const auto& n : params.named) n.value->requires_grad = true;
}

void train_warmup(ModelParams& params, AdamState& state, const TrainingCorpus& corpus,
                  const RunConfig& cfg, std::vector<StepRecord>& records) {
    train_steps(params, state, corpus, cfg, 0, cfg.train.warmup_steps, records);
}

void train_full(ModelParams& params, AdamState& state, const TrainingCorpus& corpus,
                const RunConfig& cfg, std::vector<StepRecord>& records) {
    train_steps(params, state, corpus, cfg, cfg.train.warmup_steps, cfg.train.total_steps,
                records);
}

std::vector<std::pair<std::string, TensorPtr>> adam_state_tensors(const AdamState& state) {
    std::vector<std::pair<std::string, TensorPtr>> out;
    out.emplace_back("adam.t", Tensor::scalar(static_cast<double>(state.t)));
    for (const auto& [name, slot] : state.slots) {
        out.emplace_back("adam.m." + name,
                         Tensor::create({static_cast<std::int64_t>(slot.m.size())}, slot.m));
        out.emplace_back("adam.v." + name,
                         Tensor::create({static_cast<std::int64_t>(slot.v.size())}, slot.v));
    }
    return out;
}

AdamState adam_state_from_checkpoint(const Checkpoint& ck) {
    AdamState state;
    if (const TensorPtr t = ck.find("adam.t"))
        state.t = static_cast<std::int64_t>(t->item());
    for (const auto& [name, tensor] : ck.tensors) {
        if (name.rfind("adam.m.", 0) == 0)
            state.slots[name.substr(7)].m = tensor->data;
        else if (name.rfind("adam.v.", 0) == 0)
            state.slots[name.substr(7)].v = tensor->data;
    }
    for (const auto& [name, slot] : state.slots)
        if (slot.m.size() != slot.v.size())
            throw CorruptFile("optimizer slot " + name + " has mismatched moment sizes");
    return state;
}

TrainResult run_training(const RunConfig& cfg, const TrainingCorpus& corpus,
                         const std::string& out_dir, const std::string& resume_checkpoint) {
    cfg.validate();
    fs::create_directories(out_dir);

    ModelParams params;
    AdamState state;
    std::int64_t start = 0;
    if (resume_checkpoint.empty()) {
        params = init_params(cfg.model, cfg.seed);
    } else {
        const Checkpoint ck = load_checkpoint(resume_checkpoint);
        if (canonical_json(ck.config) != canonical_json(to_json(cfg)))
            throw InvalidConfig("resume checkpoint was trained under a different config");
        params = params_from_checkpoint(ck);
        state = adam_state_from_checkpoint(ck);
        start = static_cast<std::int64_t>(ck.step);
        if (start > cfg.train.total_steps)
            throw InvalidConfig("resume checkpoint is past train.total_steps");
    }

    TrainResult result;
    result.log_path = (fs::path(out_dir) / "train_log.jsonl").string();

    // The log must describe exactly the trajectory behind the final
    // checkpoint: drop any entries at or past the resume step.
    std::vector<std::string> kept;
    if (start > 0 && fs::exists(result.log_path)) {
        std::ifstream in(result.log_path);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            try {
                if (json::parse(line).at("step").get<std::int64_t>() < start)
                    kept.push_back(line);
            } catch (const json::exception&) {
                break; // drop a torn tail write and everything after it
            }
        }
    }
    {
        std::ofstream reset(result.log_path, std::ios::trunc);
        for (const auto& line : kept) reset << line << "\n";
    }

    std::ofstream log(result.log_path, std::ios::app);
    if (!log) throw Error("cannot open training log " + result.log_path);

    const json config_echo = to_json(cfg);
    auto write_checkpoint = [&](const std::string& name, std::int64_t step) {
        const std::string path = (fs::path(out_dir) / name).string();
        save_checkpoint(path, params, adam_state_tensors(state), config_echo,
                        static_cast<std::uint64_t>(step));
        return path;
    };

    for (std::int64_t step = start; step < cfg.train.total_steps; ++step) {
        std::vector<StepRecord> records;
        try {
            train_steps(params, state, corpus, cfg, step, step + 1, records);
        } catch (const NonFiniteLoss& e) {
            const json diag{{"step", step},
                            {"batch_ids", make_batch(corpus, cfg.train, cfg.seed, step).ids},
                            {"error", e.what()}};
            std::ofstream diag_out(fs::path(out_dir) / "nonfinite_diagnostic.json");
            diag_out << canonical_json(diag);
            throw;
        }
        log << step_record_line(records.front()) << "\n";
        log.flush();
        if (cfg.train.eval_cadence > 0 && (step + 1) % cfg.train.eval_cadence == 0 &&
            step + 1 < cfg.train.total_steps) {
            char name[40];
            std::snprintf(name, sizeof name, "ckpt_%06lld.dgck", static_cast<long long>(step + 1));
            result.checkpoints.push_back(write_checkpoint(name, step + 1));
        }
    }

    result.final_checkpoint = write_checkpoint("final.dgck", cfg.train.total_steps);
    result.params = std::move(params);
    return result;
}

} // namespace dg

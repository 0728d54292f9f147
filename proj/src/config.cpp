#include "dg/config.hpp"

#include <fstream>
#include <set>

namespace dg {

namespace {

void require_positive(std::int64_t v, const std::string& name) {
    if (v <= 0) throw InvalidConfig(name + " must be positive, got " + std::to_string(v));
}

void require_positive(double v, const std::string& name) {
    if (!(v > 0.0)) throw InvalidConfig(name + " must be positive");
}

// Rejects keys outside `known`, naming the offender with its section path.
void check_keys(const nlohmann::json& j, const std::set<std::string>& known,
                const std::string& section) {
    if (!j.is_object()) {
        throw InvalidConfig("config section \"" + (section.empty() ? "<root>" : section) +
                            "\" must be a JSON object");
    }
    for (const auto& item : j.items()) {
        if (!known.count(item.key())) {
            const std::string path =
                section.empty() ? item.key() : section + "." + item.key();
            throw InvalidConfig("unknown config key \"" + path + "\"");
        }
    }
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& section) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        const std::string path = section.empty() ? key : section + "." + key;
        throw InvalidConfig("config key \"" + path + "\": " + e.what());
    }
}

} // namespace

HeadPool head_pool_from_string(const std::string& s) {
    if (s == "max") return HeadPool::Max;
    if (s == "mean") return HeadPool::Mean;
    throw InvalidConfig("head_pool must be \"max\" or \"mean\", got \"" + s + "\"");
}

std::string to_string(HeadPool p) { return p == HeadPool::Max ? "max" : "mean"; }

void ModelConfig::validate() const {
    require_positive(c, "model.c");
    require_positive(k, "model.k");
    require_positive(image_size, "model.image_size");
    require_positive(image_channels, "model.image_channels");
    require_positive(clip_len, "model.clip_len");
    require_positive(clip_channels, "model.clip_channels");
    require_positive(audio_hidden, "model.audio_hidden");
    require_positive(eps_ln, "model.eps_ln");
    if (visual_widths.size() != 3 || audio_widths.size() != 3) {
        throw InvalidConfig("model.visual_widths and model.audio_widths must list 3 block widths");
    }
    for (auto v : visual_widths) require_positive(v, "model.visual_widths[]");
    for (auto v : audio_widths) require_positive(v, "model.audio_widths[]");
    if (image_size % stride_product != 0) {
        throw InvalidConfig("model.image_size must be divisible by " +
                            std::to_string(stride_product));
    }
    if (clip_len % stride_product != 0) {
        throw InvalidConfig("model.clip_len must be divisible by " +
                            std::to_string(stride_product));
    }
}

void DataConfig::validate() const {
    require_positive(classes, "data.classes");
    require_positive(min_objects, "data.min_objects");
    require_positive(max_objects, "data.max_objects");
    if (train_samples < 0 || eval_samples < 0) {
        throw InvalidConfig("data sample counts must be >= 0");
    }
    require_positive(image_size, "data.image_size");
    require_positive(image_channels, "data.image_channels");
    require_positive(clip_len, "data.clip_len");
    require_positive(clip_channels, "data.clip_channels");
    require_positive(cell, "data.cell");
    require_positive(event_len, "data.event_len");
    if (min_objects > max_objects) throw InvalidConfig("data.min_objects > data.max_objects");
    if (image_size % cell != 0) throw InvalidConfig("data.image_size must be divisible by data.cell");
    if (max_objects > grid() * grid()) {
        throw InvalidConfig("data.max_objects exceeds the number of grid cells");
    }
    if (max_objects > classes) throw InvalidConfig("data.max_objects exceeds data.classes");
    if (regime_ratio < 0.0 || regime_ratio > 1.0) {
        throw InvalidConfig("data.regime_ratio must lie in [0,1]");
    }
    if (min_valid_frac <= 0.0 || min_valid_frac > 1.0) {
        throw InvalidConfig("data.min_valid_frac must lie in (0,1]");
    }
    if (image_noise < 0.0 || audio_noise < 0.0) {
        throw InvalidConfig("data noise amplitudes must be >= 0");
    }
    if (event_len > clip_len) throw InvalidConfig("data.event_len exceeds data.clip_len");
}

void TrainConfig::validate() const {
    if (batch_size < 2) throw InvalidConfig("train.batch_size must be >= 2");
    if (batch_size % 2 != 0 && regime == "mixed") {
        throw InvalidConfig("train.batch_size must be even for the mixed regime split");
    }
    if (warmup_steps < 0 || total_steps < 0) throw InvalidConfig("train step counts must be >= 0");
    if (warmup_steps > total_steps) throw InvalidConfig("train.warmup_steps > train.total_steps");
    require_positive(lr_warmup, "train.lr_warmup");
    require_positive(lr_full, "train.lr_full");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw InvalidConfig("train.beta1/beta2 must lie in [0,1)");
    }
    require_positive(adam_eps, "train.adam_eps");
    require_positive(clip_norm, "train.clip_norm");
    if (splice_prob < 0.0 || splice_prob > 1.0 || flip_prob < 0.0 || flip_prob > 1.0) {
        throw InvalidConfig("train augmentation probabilities must lie in [0,1]");
    }
    if (!(splice_min_frac > 0.0) || splice_min_frac > splice_max_frac || splice_max_frac > 1.0) {
        throw InvalidConfig("train splice fractions must satisfy 0 < min <= max <= 1");
    }
    require_positive(eval_cadence, "train.eval_cadence");
    require_positive(omega, "train.omega");
    if (regime != "mixed" && regime != "language" && regime != "sound") {
        throw InvalidConfig("train.regime must be one of mixed|language|sound");
    }
    if (lambda_dis < 0 || lambda_splice < 0 || lambda_cal < 0 || lambda_nonneg < 0 ||
        lambda_tv < 0) {
        throw InvalidConfig("train lambda weights must be >= 0");
    }
    static const std::set<std::string> known_terms = {"dis", "splice", "cal", "nonneg", "tv"};
    for (const auto& term : disable) {
        if (!known_terms.count(term)) {
            throw InvalidConfig("train.disable contains unknown term \"" + term + "\"");
        }
    }
}

void EvalConfig::validate() const {
    if (retrieval_n < 10) throw InvalidConfig("eval.retrieval_n must be >= 10");
    require_positive(miou_thresholds, "eval.miou_thresholds");
}

void RunConfig::validate() const {
    model.validate();
    data.validate();
    train.validate();
    eval.validate();
    if (model.image_size != data.image_size || model.image_channels != data.image_channels ||
        model.clip_len != data.clip_len || model.clip_channels != data.clip_channels) {
        throw InvalidConfig("model and data input dimensions disagree");
    }
}

nlohmann::json to_json(const ModelConfig& m) {
    return {
        {"c", m.c},
        {"k", m.k},
        {"image_size", m.image_size},
        {"image_channels", m.image_channels},
        {"clip_len", m.clip_len},
        {"clip_channels", m.clip_channels},
        {"visual_widths", m.visual_widths},
        {"audio_widths", m.audio_widths},
        {"audio_hidden", m.audio_hidden},
        {"head_pool", to_string(m.head_pool)},
        {"eps_ln", m.eps_ln},
    };
}

nlohmann::json to_json(const DataConfig& d) {
    return {
        {"classes", d.classes},
        {"min_objects", d.min_objects},
        {"max_objects", d.max_objects},
        {"train_samples", d.train_samples},
        {"eval_samples", d.eval_samples},
        {"regime_ratio", d.regime_ratio},
        {"image_size", d.image_size},
        {"image_channels", d.image_channels},
        {"clip_len", d.clip_len},
        {"clip_channels", d.clip_channels},
        {"cell", d.cell},
        {"event_len", d.event_len},
        {"image_noise", d.image_noise},
        {"audio_noise", d.audio_noise},
        {"min_valid_frac", d.min_valid_frac},
    };
}

nlohmann::json to_json(const TrainConfig& t) {
    return {
        {"batch_size", t.batch_size},
        {"warmup_steps", t.warmup_steps},
        {"total_steps", t.total_steps},
        {"lr_warmup", t.lr_warmup},
        {"lr_full", t.lr_full},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"adam_eps", t.adam_eps},
        {"clip_norm", t.clip_norm},
        {"splice_prob", t.splice_prob},
        {"splice_min_frac", t.splice_min_frac},
        {"splice_max_frac", t.splice_max_frac},
        {"flip_prob", t.flip_prob},
        {"eval_cadence", t.eval_cadence},
        {"regime", t.regime},
        {"omega", t.omega},
        {"lambda_dis", t.lambda_dis},
        {"lambda_splice", t.lambda_splice},
        {"lambda_cal", t.lambda_cal},
        {"lambda_nonneg", t.lambda_nonneg},
        {"lambda_tv", t.lambda_tv},
        {"disable", t.disable},
    };
}

nlohmann::json to_json(const EvalConfig& e) {
    return {
        {"retrieval_n", e.retrieval_n},
        {"miou_thresholds", e.miou_thresholds},
    };
}

nlohmann::json to_json(const RunConfig& r) {
    return {
        {"seed", r.seed},
        {"model", to_json(r.model)},
        {"data", to_json(r.data)},
        {"train", to_json(r.train)},
        {"eval", to_json(r.eval)},
    };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {
        "c",           "k",           "image_size",    "image_channels",
        "clip_len",    "clip_channels", "visual_widths", "audio_widths",
        "audio_hidden", "head_pool",   "eps_ln"};
    check_keys(j, known, "model");
    ModelConfig m;
    read_field(j, "c", m.c, "model");
    read_field(j, "k", m.k, "model");
    read_field(j, "image_size", m.image_size, "model");
    read_field(j, "image_channels", m.image_channels, "model");
    read_field(j, "clip_len", m.clip_len, "model");
    read_field(j, "clip_channels", m.clip_channels, "model");
    read_field(j, "visual_widths", m.visual_widths, "model");
    read_field(j, "audio_widths", m.audio_widths, "model");
    read_field(j, "audio_hidden", m.audio_hidden, "model");
    std::string pool = to_string(m.head_pool);
    read_field(j, "head_pool", pool, "model");
    m.head_pool = head_pool_from_string(pool);
    read_field(j, "eps_ln", m.eps_ln, "model");
    m.validate();
    return m;
}

DataConfig data_config_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {
        "classes",      "min_objects",  "max_objects",   "train_samples", "eval_samples",
        "regime_ratio", "image_size",   "image_channels", "clip_len",     "clip_channels",
        "cell",         "event_len",    "image_noise",   "audio_noise",   "min_valid_frac"};
    check_keys(j, known, "data");
    DataConfig d;
    read_field(j, "classes", d.classes, "data");
    read_field(j, "min_objects", d.min_objects, "data");
    read_field(j, "max_objects", d.max_objects, "data");
    read_field(j, "train_samples", d.train_samples, "data");
    read_field(j, "eval_samples", d.eval_samples, "data");
    read_field(j, "regime_ratio", d.regime_ratio, "data");
    read_field(j, "image_size", d.image_size, "data");
    read_field(j, "image_channels", d.image_channels, "data");
    read_field(j, "clip_len", d.clip_len, "data");
    read_field(j, "clip_channels", d.clip_channels, "data");
    read_field(j, "cell", d.cell, "data");
    read_field(j, "event_len", d.event_len, "data");
    read_field(j, "image_noise", d.image_noise, "data");
    read_field(j, "audio_noise", d.audio_noise, "data");
    read_field(j, "min_valid_frac", d.min_valid_frac, "data");
    d.validate();
    return d;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {
        "batch_size", "warmup_steps",    "total_steps",     "lr_warmup",
        "lr_full",    "beta1",           "beta2",           "adam_eps",
        "clip_norm",  "splice_prob",     "splice_min_frac", "splice_max_frac",
        "flip_prob",  "eval_cadence",    "regime",          "omega",
        "lambda_dis", "lambda_splice",   "lambda_cal",      "lambda_nonneg",
        "lambda_tv",  "disable"};
    check_keys(j, known, "train");
    TrainConfig t;
    read_field(j, "batch_size", t.batch_size, "train");
    read_field(j, "warmup_steps", t.warmup_steps, "train");
    read_field(j, "total_steps", t.total_steps, "train");
    read_field(j, "lr_warmup", t.lr_warmup, "train");
    read_field(j, "lr_full", t.lr_full, "train");
    read_field(j, "beta1", t.beta1, "train");
    read_field(j, "beta2", t.beta2, "train");
    read_field(j, "adam_eps", t.adam_eps, "train");
    read_field(j, "clip_norm", t.clip_norm, "train");
    read_field(j, "splice_prob", t.splice_prob, "train");
    read_field(j, "splice_min_frac", t.splice_min_frac, "train");
    read_field(j, "splice_max_frac", t.splice_max_frac, "train");
    read_field(j, "flip_prob", t.flip_prob, "train");
    read_field(j, "eval_cadence", t.eval_cadence, "train");
    read_field(j, "regime", t.regime, "train");
    read_field(j, "omega", t.omega, "train");
    read_field(j, "lambda_dis", t.lambda_dis, "train");
    read_field(j, "lambda_splice", t.lambda_splice, "train");
    read_field(j, "lambda_cal", t.lambda_cal, "train");
    read_field(j, "lambda_nonneg", t.lambda_nonneg, "train");
    read_field(j, "lambda_tv", t.lambda_tv, "train");
    read_field(j, "disable", t.disable, "train");
    t.validate();
    return t;
}

EvalConfig eval_config_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {"retrieval_n", "miou_thresholds"};
    check_keys(j, known, "eval");
    EvalConfig e;
    read_field(j, "retrieval_n", e.retrieval_n, "eval");
    read_field(j, "miou_thresholds", e.miou_thresholds, "eval");
    e.validate();
    return e;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {"seed", "model", "data", "train", "eval"};
    check_keys(j, known, "");
    RunConfig r;
    read_field(j, "seed", r.seed, "");
    if (j.contains("model")) r.model = model_config_from_json(j.at("model"));
    if (j.contains("data")) r.data = data_config_from_json(j.at("data"));
    if (j.contains("train")) r.train = train_config_from_json(j.at("train"));
    if (j.contains("eval")) r.eval = eval_config_from_json(j.at("eval"));
    r.validate();
    return r;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidConfig("cannot open config file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InvalidConfig("config file " + path + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

std::string canonical_json(const nlohmann::json& j) {
    return j.dump(2) + "\n";
}

} // namespace dg

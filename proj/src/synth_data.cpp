#include "dg/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "dg/error.hpp"
#include "dg/similarity.hpp"

namespace dg {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

constexpr double kTwoPi = 6.283185307179586476925287;
// Class signatures are a fixed property of the generator (shared by every
// corpus), so their stream is keyed by a constant rather than the corpus seed.
constexpr std::uint64_t kVocabularyKey = 0x0D65C0DEULL;

// Every generated value passes through f32 once, so the in-memory sample is
// bitwise equal to what a save/load round-trip yields.
double q32(double v) { return static_cast<double>(static_cast<float>(v)); }

std::int64_t language_period(std::int64_t class_id) {
    return 24 + (4 * class_id + 2) / 3; // 24 + ceil(4c/3): distinct, all >= 24
}

std::int64_t sound_period(std::int64_t class_id) { return 4 + class_id; }

// Four of eight envelope slots carry the carrier; the rest are silent,
// giving the language vocabulary its burst-like temporal structure.
std::vector<std::int64_t> language_on_slots(std::int64_t class_id) {
    Rng rng = Rng(kVocabularyKey).sub("lang_env").fork(static_cast<std::uint64_t>(class_id));
    std::vector<std::int64_t> slots(8);
    std::iota(slots.begin(), slots.end(), 0);
    rng.shuffle(slots);
    slots.resize(4);
    std::sort(slots.begin(), slots.end());
    return slots;
}

void check_class_id(const DataConfig& d, std::int64_t class_id) {
    if (class_id < 0 || class_id >= d.classes)
        throw OutOfBounds("class_id " + std::to_string(class_id) + " outside vocabulary of " +
                          std::to_string(d.classes));
}

void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& is, const char* what) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw CorruptFile(std::string("truncated sample file reading ") + what);
    return v;
}

std::uint64_t read_u64(std::istream& is, const char* what) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw CorruptFile(std::string("truncated sample file reading ") + what);
    return v;
}

std::vector<std::int64_t> shape_from_json(const json& j) {
    std::vector<std::int64_t> s;
    for (const auto& v : j) s.push_back(v.get<std::int64_t>());
    return s;
}

} // namespace

std::string to_string(Regime r) {
    return r == Regime::Language ? "language" : "sound";
}

Regime regime_from_string(const std::string& s) {
    if (s == "language") return Regime::Language;
    if (s == "sound") return Regime::Sound;
    throw CorruptFile("unknown regime \"" + s + "\"");
}

TensorPtr class_texture(const DataConfig& d, std::uint64_t corpus_seed, std::int64_t class_id) {
    check_class_id(d, class_id);
    NoGradGuard ng;
    Rng rng = Rng(corpus_seed).sub("texture").fork(static_cast<std::uint64_t>(class_id));
    const std::int64_t C = d.image_channels, S = d.cell;
    auto out = Tensor::zeros({C, S, S});
    for (std::int64_t c = 0; c < C; ++c) {
        std::vector<double> lattice(16);
        for (auto& v : lattice) v = rng.uniform();
        auto up = upsample_bilinear(Tensor::create({4, 4}, std::move(lattice)), S, S);
        for (std::int64_t i = 0; i < S * S; ++i)
            out->data[c * S * S + i] = q32(0.15 + 0.7 * up->data[i]);
    }
    return out;
}

std::vector<double> class_signature(const DataConfig& d, Regime regime, std::int64_t class_id) {
    check_class_id(d, class_id);
    const std::int64_t L = d.event_len;
    std::vector<double> sig(static_cast<std::size_t>(L), 0.0);
    if (regime == Regime::Sound) {
        // Fast AM tone: period 4..15 samples, shallow amplitude wobble.
        const double period = static_cast<double>(sound_period(class_id));
        for (std::int64_t t = 0; t < L; ++t) {
            double am = 0.85 + 0.15 * std::sin(kTwoPi * static_cast<double>(t) / 32.0);
            sig[static_cast<std::size_t>(t)] =
                q32(0.8 * am * std::sin(kTwoPi * static_cast<double>(t) / period));
        }
    } else {
        // Slow carrier (period 24..39) gated by four of eight envelope slots.
        const double period = static_cast<double>(language_period(class_id));
        const auto slots = language_on_slots(class_id);
        for (std::int64_t s : slots) {
            const std::int64_t lo = s * L / 8, hi = (s + 1) * L / 8;
            for (std::int64_t t = lo; t < hi; ++t)
                sig[static_cast<std::size_t>(t)] =
                    q32(0.8 * std::sin(kTwoPi * static_cast<double>(t) / period));
        }
    }
    return sig;
}

nlohmann::json vocabulary_tables(const DataConfig& d) {
    json lang = json::array(), sound = json::array();
    for (std::int64_t c = 0; c < d.classes; ++c) {
        lang.push_back({{"class", c},
                        {"period", language_period(c)},
                        {"on_slots", language_on_slots(c)},
                        {"amplitude", 0.8}});
        sound.push_back({{"class", c},
                         {"period", sound_period(c)},
                         {"am_period", 32},
                         {"am_depth", 0.15},
                         {"amplitude", 0.8}});
    }
    return json{{"language", lang}, {"sound", sound}};
}

SamplePair make_sample(const DataConfig& d, std::uint64_t corpus_seed, Regime regime, Rng& rng) {
    NoGradGuard ng;
    const std::int64_t C = d.image_channels, H = d.image_size, W = d.image_size;
    const std::int64_t T = d.clip_len, AC = d.clip_channels, G = d.grid(), S = d.cell;
    const std::int64_t L = d.event_len;

    // Draw order is part of the format: n_objects, valid_len, classes, cells,
    // event offsets, image noise, audio noise.
    const std::int64_t n_obj =
        d.min_objects +
        static_cast<std::int64_t>(rng.uniform_below(
            static_cast<std::uint64_t>(d.max_objects - d.min_objects + 1)));
    const std::int64_t min_valid =
        static_cast<std::int64_t>(std::ceil(d.min_valid_frac * static_cast<double>(T)));
    const std::int64_t valid_len =
        min_valid +
        static_cast<std::int64_t>(rng.uniform_below(static_cast<std::uint64_t>(T - min_valid + 1)));

    const std::int64_t slack = valid_len - n_obj * L;
    if (slack < 0)
        throw PlacementFailure(std::to_string(n_obj) + " events of length " + std::to_string(L) +
                               " cannot fit in valid_len " + std::to_string(valid_len));

    std::vector<std::int64_t> class_pool(static_cast<std::size_t>(d.classes));
    std::iota(class_pool.begin(), class_pool.end(), 0);
    rng.shuffle(class_pool);
    std::vector<std::int64_t> cell_pool(static_cast<std::size_t>(G * G));
    std::iota(cell_pool.begin(), cell_pool.end(), 0);
    rng.shuffle(cell_pool);

    // Disjoint event windows: sort n uniform offsets in [0, slack] and lay the
    // events end to end after each offset. Succeeds whenever fitting is
    // possible at all, so no retry loop is needed.
    std::vector<std::int64_t> offsets(static_cast<std::size_t>(n_obj));
    for (auto& u : offsets)
        u = static_cast<std::int64_t>(rng.uniform_below(static_cast<std::uint64_t>(slack + 1)));
    std::sort(offsets.begin(), offsets.end());

    SamplePair s;
    s.regime = regime;
    s.valid_len = valid_len;

    std::vector<double> image(static_cast<std::size_t>(C * H * W), 0.5);
    for (std::int64_t i = 0; i < n_obj; ++i) {
        ObjectInstance obj;
        obj.class_id = class_pool[static_cast<std::size_t>(i)];
        const std::int64_t cell_idx = cell_pool[static_cast<std::size_t>(i)];
        obj.cell_y = cell_idx / G;
        obj.cell_x = cell_idx % G;
        obj.t_start = offsets[static_cast<std::size_t>(i)] + i * L;
        obj.t_end = obj.t_start + L;

        auto tex = class_texture(d, corpus_seed, obj.class_id);
        auto mask = Tensor::zeros({H, W});
        const std::int64_t y0 = obj.cell_y * S, x0 = obj.cell_x * S;
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t y = 0; y < S; ++y)
                for (std::int64_t x = 0; x < S; ++x)
                    image[static_cast<std::size_t>((c * H + y0 + y) * W + x0 + x)] =
                        tex->data[static_cast<std::size_t>((c * S + y) * S + x)];
        for (std::int64_t y = 0; y < S; ++y)
            for (std::int64_t x = 0; x < S; ++x)
                mask->data[static_cast<std::size_t>((y0 + y) * W + x0 + x)] = 1.0;
        obj.mask = mask;
        s.objects.push_back(std::move(obj));
    }
    for (auto& v : image) v = q32(v + d.image_noise * rng.normal());
    s.image = Tensor::create({C, H, W}, std::move(image));

    std::vector<double> clip(static_cast<std::size_t>(AC * T), 0.0);
    for (std::int64_t c = 0; c < AC; ++c)
        for (std::int64_t t = 0; t < valid_len; ++t)
            clip[static_cast<std::size_t>(c * T + t)] = d.audio_noise * rng.normal();
    for (const auto& obj : s.objects) {
        const auto sig = class_signature(d, regime, obj.class_id);
        for (std::int64_t c = 0; c < AC; ++c)
            for (std::int64_t t = obj.t_start; t < obj.t_end; ++t)
                clip[static_cast<std::size_t>(c * T + t)] +=
                    sig[static_cast<std::size_t>(t - obj.t_start)];
    }
    for (auto& v : clip) v = q32(v);
    s.clip = Tensor::create({AC, T}, std::move(clip));

    s.splice_mask.assign(static_cast<std::size_t>(T), 0.0);
    for (std::int64_t t = valid_len; t < T; ++t) s.splice_mask[static_cast<std::size_t>(t)] = 1.0;
    return s;
}

SpliceResult splice_negative(const TensorPtr& clip, const TensorPtr& donor_segment,
                             std::int64_t position, std::int64_t ramp_len) {
    NoGradGuard ng;
    if (!clip || clip->shape.size() != 2)
        throw ShapeMismatch("splice_negative expects a [channels, time] clip");
    if (!donor_segment || donor_segment->shape.size() != 2 ||
        donor_segment->shape[0] != clip->shape[0])
        throw ShapeMismatch("donor segment must be [channels, length] with matching channels");
    const std::int64_t C = clip->shape[0], T = clip->shape[1], L = donor_segment->shape[1];
    const std::int64_t R = ramp_len;
    if (R < 0) throw OutOfBounds("negative ramp_len");
    if (position < 0 || position + L > T)
        throw OutOfBounds("spliced segment [" + std::to_string(position) + ", " +
                          std::to_string(position + L) + ") outside clip of length " +
                          std::to_string(T));

    SpliceResult out;
    out.clip = Tensor::create(clip->shape, clip->data);
    out.mask.assign(static_cast<std::size_t>(T), 0.0);
    if (L == 0) return out;
    if (2 * R > L)
        throw OutOfBounds("ramps of length " + std::to_string(R) +
                          " exceed donor segment of length " + std::to_string(L));

    for (std::int64_t u = 0; u < L; ++u) {
        // Donor weight: linear ramps inside the segment, 1 between them. At an
        // odd ramp's midpoint the weight is exactly 1/2.
        double w = 1.0;
        if (u < R) w = static_cast<double>(u + 1) / static_cast<double>(R + 1);
        else if (u >= L - R) w = static_cast<double>(L - u) / static_cast<double>(R + 1);
        out.mask[static_cast<std::size_t>(position + u)] = w;
        for (std::int64_t c = 0; c < C; ++c) {
            const std::size_t i = static_cast<std::size_t>(c * T + position + u);
            out.clip->data[i] = (1.0 - w) * clip->data[i] +
                                w * donor_segment->data[static_cast<std::size_t>(c * L + u)];
        }
    }
    return out;
}

PadResult pad_or_trim(const TensorPtr& clip, std::int64_t t_target) {
    NoGradGuard ng;
    if (!clip || clip->shape.size() != 2)
        throw ShapeMismatch("pad_or_trim expects a [channels, time] clip");
    if (t_target < 0) throw InvalidConfig("negative pad_or_trim target length");
    const std::int64_t C = clip->shape[0], T = clip->shape[1];
    PadResult out;
    out.valid_len = std::min(T, t_target);
    out.clip = Tensor::zeros({C, t_target});
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t t = 0; t < out.valid_len; ++t)
            out.clip->data[static_cast<std::size_t>(c * t_target + t)] =
                clip->data[static_cast<std::size_t>(c * T + t)];
    out.silence_mask.assign(static_cast<std::size_t>(t_target), 0.0);
    for (std::int64_t t = out.valid_len; t < t_target; ++t)
        out.silence_mask[static_cast<std::size_t>(t)] = 1.0;
    return out;
}

void save_sample(const std::string& path, const SamplePair& s) {
    json objects = json::array();
    for (const auto& obj : s.objects)
        objects.push_back({{"class_id", obj.class_id},
                           {"cell", {obj.cell_y, obj.cell_x}},
                           {"event", {obj.t_start, obj.t_end}}});
    const json header{{"version", 1},
                      {"regime", to_string(s.regime)},
                      {"valid_len", s.valid_len},
                      {"image_shape", s.image->shape},
                      {"clip_shape", s.clip->shape},
                      {"objects", objects}};
    const std::string htext = canonical_json(header);

    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    os.write("DGSP", 4);
    write_u32(os, 1);
    write_u64(os, htext.size());
    os.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    write_tensor(os, *s.image, DType::F32);
    write_tensor(os, *s.clip, DType::F32);
    const auto splice =
        Tensor::create({static_cast<std::int64_t>(s.splice_mask.size())}, s.splice_mask);
    write_tensor(os, *splice, DType::F32);
    for (const auto& obj : s.objects) write_tensor(os, *obj.mask, DType::F32);
    if (!os) throw Error("failed writing " + path);
}

SamplePair load_sample(const std::string& path) {
    NoGradGuard ng;
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CorruptFile("cannot open sample file " + path);
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DGSP", 4) != 0) throw CorruptFile("bad sample magic");
    if (read_u32(is, "version") != 1) throw CorruptFile("unsupported sample version");
    const std::uint64_t hlen = read_u64(is, "header length");
    if (hlen > (1u << 24)) throw CorruptFile("implausible sample header length");
    std::string htext(hlen, '\0');
    is.read(htext.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw CorruptFile("truncated sample header");

    SamplePair s;
    std::vector<std::int64_t> image_shape, clip_shape;
    std::size_t n_obj = 0;
    try {
        const json header = json::parse(htext);
        if (header.at("version").get<std::int64_t>() != 1)
            throw CorruptFile("unsupported sample version");
        s.regime = regime_from_string(header.at("regime").get<std::string>());
        s.valid_len = header.at("valid_len").get<std::int64_t>();
        image_shape = shape_from_json(header.at("image_shape"));
        clip_shape = shape_from_json(header.at("clip_shape"));
        for (const auto& jobj : header.at("objects")) {
            ObjectInstance obj;
            obj.class_id = jobj.at("class_id").get<std::int64_t>();
            obj.cell_y = jobj.at("cell").at(0).get<std::int64_t>();
            obj.cell_x = jobj.at("cell").at(1).get<std::int64_t>();
            obj.t_start = jobj.at("event").at(0).get<std::int64_t>();
            obj.t_end = jobj.at("event").at(1).get<std::int64_t>();
            s.objects.push_back(std::move(obj));
        }
        n_obj = s.objects.size();
    } catch (const json::exception& e) {
        throw CorruptFile(std::string("bad sample header: ") + e.what());
    }

    s.image = read_tensor(is);
    s.clip = read_tensor(is);
    auto splice = read_tensor(is);
    std::vector<TensorPtr> masks;
    for (std::size_t i = 0; i < n_obj; ++i) masks.push_back(read_tensor(is));
    if (is.peek() != std::char_traits<char>::eof())
        throw CorruptFile("trailing data after sample tensors");

    if (s.image->shape != image_shape || image_shape.size() != 3)
        throw CorruptFile("image tensor does not match header shape");
    if (s.clip->shape != clip_shape || clip_shape.size() != 2)
        throw CorruptFile("clip tensor does not match header shape");
    const std::int64_t T = clip_shape[1];
    if (splice->shape != std::vector<std::int64_t>{T})
        throw CorruptFile("splice mask does not match clip length");

    if (s.valid_len < 0 || s.valid_len > T)
        throw InvariantViolation("valid_len outside [0, clip length]");
    s.splice_mask = splice->data;
    for (double v : s.splice_mask)
        if (!(v >= 0.0 && v <= 1.0)) throw InvariantViolation("splice mask value outside [0, 1]");
    for (std::size_t i = 0; i < n_obj; ++i) {
        ObjectInstance& obj = s.objects[i];
        obj.mask = masks[i];
        if (obj.class_id < 0) throw InvariantViolation("negative class id");
        if (obj.mask->shape != std::vector<std::int64_t>{image_shape[1], image_shape[2]})
            throw CorruptFile("object mask does not match image shape");
        double total = 0.0;
        for (double v : obj.mask->data) {
            if (v != 0.0 && v != 1.0) throw InvariantViolation("object mask is not binary");
            total += v;
        }
        if (total == 0.0) throw InvariantViolation("empty object mask");
        if (obj.t_start < 0 || obj.t_start >= obj.t_end || obj.t_end > s.valid_len)
            throw InvariantViolation("event window outside [0, valid_len)");
    }
    return s;
}

nlohmann::json manifest_to_json(const CorpusManifest& m) {
    auto records = [](const std::vector<ManifestRecord>& recs) {
        json arr = json::array();
        for (const auto& r : recs) {
            json events = json::array();
            for (const auto& [t0, t1] : r.events) events.push_back({t0, t1});
            arr.push_back({{"path", r.path},
                           {"regime", to_string(r.regime)},
                           {"class_ids", r.class_ids},
                           {"events", events},
                           {"valid_len", r.valid_len}});
        }
        return arr;
    };
    return json{{"version", 1},    {"seed", m.seed},          {"config", m.config_echo},
                {"train", records(m.train)}, {"eval", records(m.eval)}, {"vocab", m.vocab}};
}

CorpusManifest generate_corpus(const DataConfig& d, std::uint64_t seed,
                               const std::string& out_dir) {
    d.validate();
    fs::create_directories(fs::path(out_dir) / "train");
    fs::create_directories(fs::path(out_dir) / "eval");

    CorpusManifest m;
    m.seed = seed;
    m.config_echo = to_json(d);
    m.vocab = vocabulary_tables(d);

    auto generate_split = [&](const char* split, std::int64_t count,
                              std::vector<ManifestRecord>& records) {
        // Exact regime counts: the first round(ratio * count) samples are
        // language. Each sample draws only from its own forked stream, so the
        // corpus is identical however generation is scheduled.
        const std::int64_t n_lang =
            static_cast<std::int64_t>(std::llround(d.regime_ratio * static_cast<double>(count)));
        for (std::int64_t i = 0; i < count; ++i) {
            const Regime regime = i < n_lang ? Regime::Language : Regime::Sound;
            Rng rng = Rng(seed).sub(split).fork(static_cast<std::uint64_t>(i));
            const SamplePair s = make_sample(d, seed, regime, rng);

            char name[32];
            std::snprintf(name, sizeof name, "sample_%05lld.dgsp", static_cast<long long>(i));
            ManifestRecord rec;
            rec.path = std::string(split) + "/" + name;
            rec.regime = regime;
            rec.valid_len = s.valid_len;
            for (const auto& obj : s.objects) {
                rec.class_ids.push_back(obj.class_id);
                rec.events.emplace_back(obj.t_start, obj.t_end);
            }
            save_sample((fs::path(out_dir) / rec.path).string(), s);
            records.push_back(std::move(rec));
        }
    };
    generate_split("train", d.train_samples, m.train);
    generate_split("eval", d.eval_samples, m.eval);

    std::ofstream os(fs::path(out_dir) / "manifest.json");
    if (!os) throw Error("cannot open manifest for writing under " + out_dir);
    os << canonical_json(manifest_to_json(m));
    if (!os) throw Error("failed writing manifest under " + out_dir);
    return m;
}

CorpusManifest load_manifest(const std::string& corpus_dir) {
    std::ifstream is(fs::path(corpus_dir) / "manifest.json");
    if (!is) throw CorruptFile("cannot open manifest under " + corpus_dir);
    CorpusManifest m;
    try {
        const json j = json::parse(is);
        if (j.at("version").get<std::int64_t>() != 1)
            throw CorruptFile("unsupported manifest version");
        m.seed = j.at("seed").get<std::uint64_t>();
        m.config_echo = j.at("config");
        m.vocab = j.at("vocab");
        const DataConfig d = data_config_from_json(m.config_echo);
        auto parse_records = [&](const json& arr) {
            std::vector<ManifestRecord> records;
            for (const auto& jr : arr) {
                ManifestRecord r;
                r.path = jr.at("path").get<std::string>();
                r.regime = regime_from_string(jr.at("regime").get<std::string>());
                for (const auto& c : jr.at("class_ids")) {
                    const auto cid = c.get<std::int64_t>();
                    if (cid < 0 || cid >= d.classes)
                        throw CorruptFile("manifest class id outside vocabulary");
                    r.class_ids.push_back(cid);
                }
                for (const auto& e : jr.at("events"))
                    r.events.emplace_back(e.at(0).get<std::int64_t>(),
                                          e.at(1).get<std::int64_t>());
                r.valid_len = jr.at("valid_len").get<std::int64_t>();
                if (!fs::exists(fs::path(corpus_dir) / r.path))
                    throw CorruptFile("manifest references missing file " + r.path);
                records.push_back(std::move(r));
            }
            return records;
        };
        m.train = parse_records(j.at("train"));
        m.eval = parse_records(j.at("eval"));
    } catch (const json::exception& e) {
        throw CorruptFile(std::string("bad manifest: ") + e.what());
    }
    return m;
}

} // namespace dg

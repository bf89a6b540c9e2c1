#include "utka/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "utka/seqgrammar.hpp"

namespace utka::config {

namespace {

using json = nlohmann::ordered_json;

// ---- strict readers ----
// Every object is checked against its full key set before any field is read,
// so a typo surfaces as "unknown key driver.lm_sched.warmup" instead of a
// silently defaulted value.

void expect_object(const json& j, const std::string& path) {
    if (!j.is_object()) throw ConfigError(path + " must be an object");
}

void expect_keys(const json& j, const std::string& path,
                 const std::set<std::string>& allowed) {
    expect_object(j, path);
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!allowed.count(it.key()))
            throw ConfigError("unknown key " + path + "." + it.key());
    }
}

template <typename T>
T get_num(const json& j, const std::string& path, const std::string& key, T dflt) {
    if (!j.contains(key)) return dflt;
    const json& v = j.at(key);
    if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(path + "." + key + " must be a number");
    } else {
        if (!v.is_number_integer() && !v.is_number_unsigned())
            throw ConfigError(path + "." + key + " must be an integer");
    }
    return v.get<T>();
}

std::string get_str(const json& j, const std::string& path, const std::string& key,
                    const std::string& dflt) {
    if (!j.contains(key)) return dflt;
    const json& v = j.at(key);
    if (!v.is_string()) throw ConfigError(path + "." + key + " must be a string");
    return v.get<std::string>();
}

// ---- field tables ----

namespace sg = utka::seqgrammar;

sg::Mode parse_mode(const std::string& name, const std::string& path) {
    for (sg::Mode m : {sg::Mode::SR, sg::Mode::TSE, sg::Mode::rTSE, sg::Mode::VC,
                       sg::Mode::LASS}) {
        if (sg::mode_name(m) == name) return m;
    }
    throw ConfigError(path + ": unknown mode name \"" + name + "\"");
}

void read_codec(const json& j, const std::string& path, codec::CodecConfig& c) {
    expect_keys(j, path,
                {"sample_rate", "downsample_ratio", "hidden_dim", "ssl_dim", "quant_dim",
                 "codebook_size", "fft_size", "fft_hop", "lambda_commit", "lambda_mel",
                 "lambda_aux", "lambda_adv", "lambda_fm"});
    c.sample_rate = get_num(j, path, "sample_rate", c.sample_rate);
    c.downsample_ratio = get_num(j, path, "downsample_ratio", c.downsample_ratio);
    c.hidden_dim = get_num(j, path, "hidden_dim", c.hidden_dim);
    c.ssl_dim = get_num(j, path, "ssl_dim", c.ssl_dim);
    c.quant_dim = get_num(j, path, "quant_dim", c.quant_dim);
    c.codebook_size = get_num(j, path, "codebook_size", c.codebook_size);
    c.fft_size = get_num(j, path, "fft_size", c.fft_size);
    c.fft_hop = get_num(j, path, "fft_hop", c.fft_hop);
    c.lambda_commit = get_num(j, path, "lambda_commit", c.lambda_commit);
    c.lambda_mel = get_num(j, path, "lambda_mel", c.lambda_mel);
    c.lambda_aux = get_num(j, path, "lambda_aux", c.lambda_aux);
    c.lambda_adv = get_num(j, path, "lambda_adv", c.lambda_adv);
    c.lambda_fm = get_num(j, path, "lambda_fm", c.lambda_fm);
}

json write_codec(const codec::CodecConfig& c) {
    json j;
    j["sample_rate"] = c.sample_rate;
    j["downsample_ratio"] = c.downsample_ratio;
    j["hidden_dim"] = c.hidden_dim;
    j["ssl_dim"] = c.ssl_dim;
    j["quant_dim"] = c.quant_dim;
    j["codebook_size"] = c.codebook_size;
    j["fft_size"] = c.fft_size;
    j["fft_hop"] = c.fft_hop;
    j["lambda_commit"] = c.lambda_commit;
    j["lambda_mel"] = c.lambda_mel;
    j["lambda_aux"] = c.lambda_aux;
    j["lambda_adv"] = c.lambda_adv;
    j["lambda_fm"] = c.lambda_fm;
    return j;
}

void read_sched(const json& j, const std::string& path, optim::ScheduleConfig& s) {
    expect_keys(j, path,
                {"kind", "peak_lr", "warmup_steps", "epoch_steps", "decay", "total_steps"});
    std::string kind = get_str(j, path, "kind",
                               s.kind == optim::ScheduleConfig::Kind::cosine
                                   ? "cosine"
                                   : "warmup_decay");
    if (kind == "cosine") {
        s.kind = optim::ScheduleConfig::Kind::cosine;
    } else if (kind == "warmup_decay") {
        s.kind = optim::ScheduleConfig::Kind::warmup_decay;
    } else {
        throw ConfigError(path + ".kind must be \"cosine\" or \"warmup_decay\"");
    }
    s.peak_lr = get_num(j, path, "peak_lr", s.peak_lr);
    s.warmup_steps = get_num(j, path, "warmup_steps", s.warmup_steps);
    s.epoch_steps = get_num(j, path, "epoch_steps", s.epoch_steps);
    s.decay = get_num(j, path, "decay", s.decay);
    s.total_steps = get_num(j, path, "total_steps", s.total_steps);
}

json write_sched(const optim::ScheduleConfig& s) {
    json j;
    j["kind"] = s.kind == optim::ScheduleConfig::Kind::cosine ? "cosine" : "warmup_decay";
    j["peak_lr"] = s.peak_lr;
    j["warmup_steps"] = s.warmup_steps;
    j["epoch_steps"] = s.epoch_steps;
    j["decay"] = s.decay;
    j["total_steps"] = s.total_steps;
    return j;
}

void read_distortion(const json& j, const std::string& path,
                     simulate::DistortionConfig& d) {
    expect_keys(j, path,
                {"p_noise", "snr_lo", "snr_hi", "p_reverb", "p_clip", "min_q_lo",
                 "min_q_hi", "max_q_lo", "max_q_hi", "p_bandlimit", "cutoffs", "p_packet",
                 "loss_lo", "loss_hi", "packet_frame_ms", "p_interferer", "sir_lo",
                 "sir_hi"});
    d.p_noise = get_num(j, path, "p_noise", d.p_noise);
    d.snr_lo = get_num(j, path, "snr_lo", d.snr_lo);
    d.snr_hi = get_num(j, path, "snr_hi", d.snr_hi);
    d.p_reverb = get_num(j, path, "p_reverb", d.p_reverb);
    d.p_clip = get_num(j, path, "p_clip", d.p_clip);
    d.min_q_lo = get_num(j, path, "min_q_lo", d.min_q_lo);
    d.min_q_hi = get_num(j, path, "min_q_hi", d.min_q_hi);
    d.max_q_lo = get_num(j, path, "max_q_lo", d.max_q_lo);
    d.max_q_hi = get_num(j, path, "max_q_hi", d.max_q_hi);
    d.p_bandlimit = get_num(j, path, "p_bandlimit", d.p_bandlimit);
    if (j.contains("cutoffs")) {
        const json& arr = j.at("cutoffs");
        if (!arr.is_array()) throw ConfigError(path + ".cutoffs must be an array");
        d.cutoffs.clear();
        for (const json& v : arr) {
            if (!v.is_number()) throw ConfigError(path + ".cutoffs entries must be numbers");
            d.cutoffs.push_back(v.get<double>());
        }
    }
    d.p_packet = get_num(j, path, "p_packet", d.p_packet);
    d.loss_lo = get_num(j, path, "loss_lo", d.loss_lo);
    d.loss_hi = get_num(j, path, "loss_hi", d.loss_hi);
    d.packet_frame_ms = get_num(j, path, "packet_frame_ms", d.packet_frame_ms);
    d.p_interferer = get_num(j, path, "p_interferer", d.p_interferer);
    d.sir_lo = get_num(j, path, "sir_lo", d.sir_lo);
    d.sir_hi = get_num(j, path, "sir_hi", d.sir_hi);
}

json write_distortion(const simulate::DistortionConfig& d) {
    json j;
    j["p_noise"] = d.p_noise;
    j["snr_lo"] = d.snr_lo;
    j["snr_hi"] = d.snr_hi;
    j["p_reverb"] = d.p_reverb;
    j["p_clip"] = d.p_clip;
    j["min_q_lo"] = d.min_q_lo;
    j["min_q_hi"] = d.min_q_hi;
    j["max_q_lo"] = d.max_q_lo;
    j["max_q_hi"] = d.max_q_hi;
    j["p_bandlimit"] = d.p_bandlimit;
    j["cutoffs"] = d.cutoffs;
    j["p_packet"] = d.p_packet;
    j["loss_lo"] = d.loss_lo;
    j["loss_hi"] = d.loss_hi;
    j["packet_frame_ms"] = d.packet_frame_ms;
    j["p_interferer"] = d.p_interferer;
    j["sir_lo"] = d.sir_lo;
    j["sir_hi"] = d.sir_hi;
    return j;
}

void read_driver(const json& j, const std::string& path, pipeline::DriverConfig& d) {
    expect_keys(j, path,
                {"codec_steps", "lm_steps", "codec_batch", "lm_batch", "clip_samples",
                 "codec_sched", "lm_sched", "mode_set", "distortion", "seed", "ema_gamma",
                 "reseed_threshold", "checkpoint_every"});
    d.codec_steps = get_num(j, path, "codec_steps", d.codec_steps);
    d.lm_steps = get_num(j, path, "lm_steps", d.lm_steps);
    d.codec_batch = get_num(j, path, "codec_batch", d.codec_batch);
    d.lm_batch = get_num(j, path, "lm_batch", d.lm_batch);
    d.clip_samples = get_num(j, path, "clip_samples", d.clip_samples);
    if (j.contains("codec_sched")) read_sched(j.at("codec_sched"), path + ".codec_sched", d.codec_sched);
    if (j.contains("lm_sched")) read_sched(j.at("lm_sched"), path + ".lm_sched", d.lm_sched);
    if (j.contains("mode_set")) {
        const json& arr = j.at("mode_set");
        if (!arr.is_array()) throw ConfigError(path + ".mode_set must be an array");
        d.mode_set.clear();
        for (const json& v : arr) {
            if (!v.is_string()) throw ConfigError(path + ".mode_set entries must be strings");
            d.mode_set.push_back(parse_mode(v.get<std::string>(), path + ".mode_set"));
        }
    }
    if (j.contains("distortion")) read_distortion(j.at("distortion"), path + ".distortion", d.distortion);
    d.seed = get_num(j, path, "seed", d.seed);
    d.ema_gamma = get_num(j, path, "ema_gamma", d.ema_gamma);
    d.reseed_threshold = get_num(j, path, "reseed_threshold", d.reseed_threshold);
    d.checkpoint_every = get_num(j, path, "checkpoint_every", d.checkpoint_every);
}

json write_driver(const pipeline::DriverConfig& d) {
    json j;
    j["codec_steps"] = d.codec_steps;
    j["lm_steps"] = d.lm_steps;
    j["codec_batch"] = d.codec_batch;
    j["lm_batch"] = d.lm_batch;
    j["clip_samples"] = d.clip_samples;
    j["codec_sched"] = write_sched(d.codec_sched);
    j["lm_sched"] = write_sched(d.lm_sched);
    json modes = json::array();
    for (sg::Mode m : d.mode_set) modes.push_back(sg::mode_name(m));
    j["mode_set"] = modes;
    j["distortion"] = write_distortion(d.distortion);
    j["seed"] = d.seed;
    j["ema_gamma"] = d.ema_gamma;
    j["reseed_threshold"] = d.reseed_threshold;
    j["checkpoint_every"] = d.checkpoint_every;
    return j;
}

void read_pools(const json& j, const std::string& path, simulate::PoolSpec& p) {
    expect_keys(j, path,
                {"n_noise", "n_rir", "n_speakers", "clips_per_speaker", "n_captioned",
                 "clip_len", "rir_max_len", "sample_rate"});
    p.n_noise = get_num(j, path, "n_noise", p.n_noise);
    p.n_rir = get_num(j, path, "n_rir", p.n_rir);
    p.n_speakers = get_num(j, path, "n_speakers", p.n_speakers);
    p.clips_per_speaker = get_num(j, path, "clips_per_speaker", p.clips_per_speaker);
    p.n_captioned = get_num(j, path, "n_captioned", p.n_captioned);
    p.clip_len = get_num(j, path, "clip_len", p.clip_len);
    p.rir_max_len = get_num(j, path, "rir_max_len", p.rir_max_len);
    p.sample_rate = get_num(j, path, "sample_rate", p.sample_rate);
}

json write_pools(const simulate::PoolSpec& p) {
    json j;
    j["n_noise"] = p.n_noise;
    j["n_rir"] = p.n_rir;
    j["n_speakers"] = p.n_speakers;
    j["clips_per_speaker"] = p.clips_per_speaker;
    j["n_captioned"] = p.n_captioned;
    j["clip_len"] = p.clip_len;
    j["rir_max_len"] = p.rir_max_len;
    j["sample_rate"] = p.sample_rate;
    return j;
}

}  // namespace

lm::LMConfig RunConfig::lm_config() const {
    lm::LMConfig c = lm::LMConfig::preset(lm_preset, codec.codebook_size, codec.ssl_dim);
    c.max_seq = lm_max_seq;
    c.validate();
    return c;
}

void RunConfig::validate() const {
    codec.validate();
    (void)lm_config();
    driver.validate();
    if (out_dir.empty()) throw ConfigError("output directory must not be empty");
}

RunConfig from_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ConfigError("configuration is not valid json");
    expect_keys(j, "config", {"codec", "lm", "driver", "simulation", "seeds", "paths"});

    RunConfig cfg;
    if (j.contains("codec")) read_codec(j.at("codec"), "codec", cfg.codec);
    if (j.contains("lm")) {
        const json& l = j.at("lm");
        expect_keys(l, "lm", {"preset", "max_seq"});
        cfg.lm_preset = get_str(l, "lm", "preset", cfg.lm_preset);
        cfg.lm_max_seq = get_num(l, "lm", "max_seq", cfg.lm_max_seq);
    }
    if (j.contains("driver")) read_driver(j.at("driver"), "driver", cfg.driver);
    if (j.contains("simulation")) {
        const json& s = j.at("simulation");
        expect_keys(s, "simulation", {"manifest", "synthetic", "seed"});
        cfg.manifest = get_str(s, "simulation", "manifest", cfg.manifest);
        if (s.contains("synthetic"))
            read_pools(s.at("synthetic"), "simulation.synthetic", cfg.synthetic);
        cfg.pools_seed = get_num(s, "simulation", "seed", cfg.pools_seed);
    }
    if (j.contains("seeds")) {
        const json& s = j.at("seeds");
        expect_keys(s, "seeds", {"codec_init", "lm_init"});
        cfg.codec_init_seed = get_num(s, "seeds", "codec_init", cfg.codec_init_seed);
        cfg.lm_init_seed = get_num(s, "seeds", "lm_init", cfg.lm_init_seed);
    }
    if (j.contains("paths")) {
        const json& p = j.at("paths");
        expect_keys(p, "paths", {"out_dir"});
        cfg.out_dir = get_str(p, "paths", "out_dir", cfg.out_dir);
    }
    return cfg;
}

std::string to_json(const RunConfig& cfg) {
    json j;
    j["codec"] = write_codec(cfg.codec);
    json lm;
    lm["preset"] = cfg.lm_preset;
    lm["max_seq"] = cfg.lm_max_seq;
    j["lm"] = lm;
    j["driver"] = write_driver(cfg.driver);
    json sim;
    sim["manifest"] = cfg.manifest;
    sim["synthetic"] = write_pools(cfg.synthetic);
    sim["seed"] = cfg.pools_seed;
    j["simulation"] = sim;
    json seeds;
    seeds["codec_init"] = cfg.codec_init_seed;
    seeds["lm_init"] = cfg.lm_init_seed;
    j["seeds"] = seeds;
    json paths;
    paths["out_dir"] = cfg.out_dir;
    j["paths"] = paths;
    return j.dump(2) + "\n";
}

RunConfig load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_json(buf.str());
}

}  // namespace utka::config

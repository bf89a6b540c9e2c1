#include "utka/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "utka/checkpoint.hpp"
#include "utka/codec.hpp"
#include "utka/config.hpp"
#include "utka/kernels.hpp"
#include "utka/pipeline.hpp"
#include "utka/simulate.hpp"
#include "utka/wav.hpp"

namespace utka::cli {

namespace {

namespace fs = std::filesystem;
namespace sg = utka::seqgrammar;
using json = nlohmann::ordered_json;

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot create file: " + path);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.flush();
    if (!out) throw IoError("failed writing file: " + path);
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

sg::Mode parse_mode(const std::string& name) {
    for (sg::Mode m : {sg::Mode::SR, sg::Mode::TSE, sg::Mode::rTSE, sg::Mode::VC,
                       sg::Mode::LASS}) {
        if (sg::mode_name(m) == name) return m;
    }
    throw ConfigError("unknown mode \"" + name + "\" (expected sr, tse, rtse, vc, or lass)");
}

std::string pair_stem(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "pair%04d", i);
    return buf;
}

// ---- simulate ----

struct SimulateArgs {
    std::string manifest;
    std::string mode;
    int count = 0;
    uint64_t seed = 1;
    std::string out;
};

int cmd_simulate(const SimulateArgs& a) {
    sg::Mode mode = parse_mode(a.mode);
    simulate::Pools pools = a.manifest.empty()
                                ? simulate::make_synthetic_pools(simulate::PoolSpec{}, a.seed)
                                : simulate::load_manifest(a.manifest);
    std::error_code ec;
    fs::create_directories(a.out, ec);
    if (ec) throw IoError("cannot create output directory: " + a.out);

    std::string provenance;
    for (int i = 0; i < a.count; ++i) {
        uint64_t pair_seed = mix_seed(a.seed, static_cast<uint64_t>(i));
        simulate::SimPair pr = simulate::make_mode_pair(mode, pools, pair_seed);
        std::string stem = pair_stem(i);
        json rec;
        rec["pair"] = i;
        rec["mode"] = a.mode;
        rec["seed"] = pair_seed;
        json files = json::array();
        auto emit = [&](const std::string& suffix, const dsp::AudioBuffer& audio) {
            std::string name = stem + suffix;
            wav::write((fs::path(a.out) / name).string(), audio);
            files.push_back(name);
        };
        emit(".input.wav", pr.input);
        emit(".target.wav", pr.target);
        if (pr.has_reference) emit(".reference.wav", pr.reference);
        if (pr.has_caption) {
            std::string name = stem + ".caption.txt";
            write_text((fs::path(a.out) / name).string(), pr.caption + "\n");
            files.push_back(name);
        }
        json applied = json::array();
        for (const auto& d : pr.applied) {
            json step;
            step["id"] = d.id;
            step["params"] = d.params;
            applied.push_back(step);
        }
        rec["applied"] = applied;
        rec["files"] = files;
        provenance += rec.dump() + "\n";
    }
    write_text((fs::path(a.out) / "provenance.jsonl").string(), provenance);

    json summary;
    summary["command"] = "simulate";
    summary["mode"] = a.mode;
    summary["count"] = a.count;
    summary["seed"] = a.seed;
    summary["source"] = a.manifest.empty() ? std::string("synthetic") : a.manifest;
    summary["sample_rate"] =
        pools.speech.empty() ? 16000 : pools.speech.front().audio.sample_rate;
    write_text((fs::path(a.out) / "summary.json").string(), summary.dump(2) + "\n");

    std::cout << "wrote " << a.count << " pairs to " << a.out << "\n";
    return 0;
}

// ---- training ----

struct TrainArgs {
    std::string config;
    std::string out;
    std::string resume;
};

int cmd_train(const TrainArgs& a, bool codec_only) {
    config::RunConfig rc = config::load_file(a.config);
    rc.validate();
    // the echo pins the run's identity; the codec-only restriction below is
    // command semantics, not configuration, so both phases share one echo
    std::string echo = config::to_json(rc);

    simulate::Pools pools = rc.manifest.empty()
                                ? simulate::make_synthetic_pools(rc.synthetic, rc.pools_seed)
                                : simulate::load_manifest(rc.manifest);

    Rng crng(rc.codec_init_seed);
    codec::CodecParams cp = codec::CodecParams::make(rc.codec, crng);
    Rng lrng(rc.lm_init_seed);
    lm::LMParams lp = lm::LMParams::make(rc.lm_config(), lrng);
    pipeline::DriverState st;

    if (!a.resume.empty()) {
        checkpoint::Checkpoint ck = checkpoint::load(a.resume);
        if (ck.config_echo.empty())
            throw ConfigError("resume checkpoint carries no configuration echo");
        if (ck.config_echo != echo)
            throw ConfigError("resume checkpoint was written under a different configuration");
        if (ck.codec) cp = std::move(*ck.codec);
        if (ck.lm) lp = std::move(*ck.lm);
        if (ck.driver) st = std::move(*ck.driver);
    }

    pipeline::DriverConfig dc = rc.driver;
    if (codec_only) dc.lm_steps = 0;
    bool with_lm = !codec_only;

    auto write_ck = [&](const std::string& path) {
        checkpoint::Checkpoint ck;
        ck.config_echo = echo;
        ck.codec = cp;
        if (with_lm) ck.lm = lp;
        ck.driver = st;
        checkpoint::save(path, ck);
    };

    pipeline::DriverResult res =
        pipeline::train_driver(cp, lp, st, pools, dc, [&](const std::string& phase, int step) {
            write_ck(a.out + "." + phase + std::to_string(step));
        });
    write_ck(a.out);
    write_text(a.out + ".log", pipeline::render_loss_records(res.log));

    std::cout << "codec steps run: " << res.codec_steps_run << "\n"
              << "lm steps run: " << res.lm_steps_run << "\n"
              << "checkpoint: " << a.out << "\n";
    return 0;
}

// ---- token round trip ----

codec::CodecParams need_codec(checkpoint::Checkpoint& ck, const std::string& path) {
    if (!ck.codec) throw ConfigError("checkpoint lacks codec parameters: " + path);
    return std::move(*ck.codec);
}

int cmd_tokenize(const std::string& ckpt, const std::string& in, const std::string& out) {
    checkpoint::Checkpoint ck = checkpoint::load(ckpt);
    codec::CodecParams cp = need_codec(ck, ckpt);
    dsp::AudioBuffer audio = wav::read(in);
    if (audio.sample_rate != cp.cfg.sample_rate)
        throw InputError("wav sample rate " + std::to_string(audio.sample_rate) +
                         " does not match the codec's " + std::to_string(cp.cfg.sample_rate));
    if (audio.length() == 0) throw InputError("empty audio: " + in);
    codec::DualTokens t = codec::encode(cp, audio);
    checkpoint::write_tokens(out, {t.acoustic, t.semantic});
    std::cout << "wrote " << t.acoustic.steps << " steps x 2 streams to " << out << "\n";
    return 0;
}

int cmd_detokenize(const std::string& ckpt, const std::string& in, const std::string& out) {
    checkpoint::Checkpoint ck = checkpoint::load(ckpt);
    codec::CodecParams cp = need_codec(ck, ckpt);
    std::vector<sg::TokenGrid> streams = checkpoint::read_tokens(in);
    if (streams.size() != 2 || streams[0].kind != sg::GridKind::acoustic ||
        streams[1].kind != sg::GridKind::semantic)
        throw InputError("expected one acoustic plus one semantic stream in " + in);
    if (streams[0].steps != streams[1].steps)
        throw InputError("stream lengths disagree in " + in);
    codec::DualTokens t{std::move(streams[0]), std::move(streams[1])};
    dsp::AudioBuffer audio = codec::decode(cp, t);
    wav::write(out, audio);
    std::cout << "wrote " << audio.length() << " samples to " << out << "\n";
    return 0;
}

// ---- generation ----

struct GenerateArgs {
    std::string ckpt;
    std::string mode;
    std::string in;
    std::string ref;
    std::string caption;
    bool has_caption = false;
    std::string out;
    uint64_t seed = 1;
    double temperature = 0.0;
    int top_k = 0;
};

std::string track_path(const std::string& out, int track) {
    std::string stem = out;
    if (stem.size() > 4 && stem.compare(stem.size() - 4, 4, ".wav") == 0)
        stem.resize(stem.size() - 4);
    return stem + ".trk" + std::to_string(track) + ".wav";
}

int cmd_generate(const GenerateArgs& a) {
    checkpoint::Checkpoint ck = checkpoint::load(a.ckpt);
    codec::CodecParams cp = need_codec(ck, a.ckpt);
    if (!ck.lm) throw ConfigError("checkpoint lacks token-lm parameters: " + a.ckpt);
    lm::LMParams lp = std::move(*ck.lm);

    lm::SamplingSpec spec;
    spec.temperature = a.temperature;
    spec.top_k = a.top_k;
    spec.seed = a.seed;

    if (a.mode == "ss") {
        if (!a.ref.empty() || a.has_caption)
            throw TemplateError("separation takes no reference or caption");
        pipeline::TaskResult r = pipeline::run_ss(cp, lp, wav::read(a.in), spec, a.seed);
        if (r.truncated) std::cerr << "warning: generation truncated\n";
        for (size_t i = 0; i < r.tracks.size(); ++i) {
            std::string path = track_path(a.out, static_cast<int>(i));
            wav::write(path, r.tracks[i]);
            std::cout << "wrote " << path << "\n";
        }
        return 0;
    }

    pipeline::TaskRequest rq;
    rq.mode = parse_mode(a.mode);
    rq.input = wav::read(a.in);
    if (!a.ref.empty()) rq.reference = wav::read(a.ref);
    if (a.has_caption) rq.caption = a.caption;
    rq.sampling = spec;
    rq.seed = a.seed;
    pipeline::TaskResult r = pipeline::run_task(cp, lp, rq);
    if (r.truncated) std::cerr << "warning: generation truncated\n";
    wav::write(a.out, r.tracks.at(0));
    std::cout << "wrote " << a.out << "\n";
    return 0;
}

// ---- evaluation ----

int cmd_evaluate(const std::string& pairs_path, const std::string& out) {
    std::istringstream lines(read_text(pairs_path));
    std::vector<std::pair<dsp::AudioBuffer, dsp::AudioBuffer>> pairs;
    std::string line;
    int lineno = 0;
    while (std::getline(lines, line)) {
        ++lineno;
        if (line.empty()) continue;
        json rec = json::parse(line, nullptr, false);
        std::string where = pairs_path + " line " + std::to_string(lineno);
        if (rec.is_discarded() || !rec.is_object())
            throw InputError("malformed pair record at " + where);
        if (!rec.contains("reference") || !rec.contains("estimate") || rec.size() != 2 ||
            !rec["reference"].is_string() || !rec["estimate"].is_string())
            throw InputError("pair records need exactly \"reference\" and \"estimate\" paths (" +
                             where + ")");
        pairs.emplace_back(wav::read(rec["reference"].get<std::string>()),
                           wav::read(rec["estimate"].get<std::string>()));
    }
    pipeline::MetricTable table = pipeline::evaluate(pairs);
    write_text(out, pipeline::render_metrics(table));
    std::cout << "wrote " << out << " (" << table.rows.size() << " pairs)\n";
    return 0;
}

// ---- kernel diagnostics ----

int cmd_backend(const std::string& force_name) {
    if (!force_name.empty()) kernels::force(force_name.c_str());
    std::cout << "active: " << kernels::active().name << "\n"
              << "avx2 compiled: " << (kernels::avx2_compiled() ? "yes" : "no") << "\n"
              << "avx2 usable: " << (kernels::avx2_usable() ? "yes" : "no") << "\n";
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
    try {
        CLI::App app{"dual-stream token audio pipeline", "utka"};
        app.require_subcommand(1);

        SimulateArgs sim;
        CLI::App* c_sim = app.add_subcommand("simulate", "synthesize (input, target) pairs");
        c_sim->add_option("--manifest", sim.manifest, "pool manifest; omit for synthetic pools");
        c_sim->add_option("--mode", sim.mode, "sr, tse, rtse, vc, or lass")->required();
        c_sim->add_option("--count", sim.count, "number of pairs")
            ->required()
            ->check(CLI::NonNegativeNumber);
        c_sim->add_option("--seed", sim.seed, "master seed");
        c_sim->add_option("--out", sim.out, "output directory")->required();

        TrainArgs tr_codec, tr_lm;
        CLI::App* c_ct = app.add_subcommand("codec-train", "train the codec phase only");
        c_ct->add_option("--config", tr_codec.config, "run configuration json")->required();
        c_ct->add_option("--out", tr_codec.out, "checkpoint path")->required();
        c_ct->add_option("--resume", tr_codec.resume, "checkpoint to continue from");
        CLI::App* c_lt = app.add_subcommand(
            "lm-train", "run outstanding codec steps, then the token-lm phase");
        c_lt->add_option("--config", tr_lm.config, "run configuration json")->required();
        c_lt->add_option("--out", tr_lm.out, "checkpoint path")->required();
        c_lt->add_option("--resume", tr_lm.resume, "checkpoint to continue from");

        std::string tok_ckpt, tok_in, tok_out;
        CLI::App* c_tok = app.add_subcommand("tokenize", "wav to dual token streams");
        c_tok->add_option("--ckpt", tok_ckpt, "codec checkpoint")->required();
        c_tok->add_option("--in", tok_in, "input wav")->required();
        c_tok->add_option("--out", tok_out, "output token file")->required();

        std::string det_ckpt, det_in, det_out;
        CLI::App* c_det = app.add_subcommand("detokenize", "dual token streams to wav");
        c_det->add_option("--ckpt", det_ckpt, "codec checkpoint")->required();
        c_det->add_option("--in", det_in, "input token file")->required();
        c_det->add_option("--out", det_out, "output wav")->required();

        GenerateArgs gen;
        CLI::App* c_gen = app.add_subcommand("generate", "run one conditioned task");
        c_gen->add_option("--ckpt", gen.ckpt, "codec + lm checkpoint")->required();
        c_gen->add_option("--mode", gen.mode, "sr, tse, rtse, vc, lass, or ss")->required();
        c_gen->add_option("--in", gen.in, "input wav")->required();
        c_gen->add_option("--ref", gen.ref, "reference wav (tse, rtse, vc)");
        CLI::Option* cap = c_gen->add_option("--caption", gen.caption, "text condition (lass)");
        c_gen->add_option("--out", gen.out, "output wav")->required();
        c_gen->add_option("--seed", gen.seed, "sampling seed");
        c_gen->add_option("--temperature", gen.temperature, "0 decodes greedily");
        c_gen->add_option("--top-k", gen.top_k, "0 keeps the full distribution");

        std::string ev_pairs, ev_out;
        CLI::App* c_ev = app.add_subcommand("evaluate", "spectral metrics over wav pairs");
        c_ev->add_option("--pairs", ev_pairs, "jsonl of {\"reference\",\"estimate\"}")
            ->required();
        c_ev->add_option("--out", ev_out, "metric table jsonl")->required();

        std::string force_name;
        CLI::App* c_bk = app.add_subcommand("backend", "report compute kernel selection");
        c_bk->add_option("--force", force_name, "scalar, avx2, or auto");

        try {
            std::vector<std::string> rev(args.rbegin(), args.rend());
            app.parse(rev);
        } catch (const CLI::ParseError& e) {
            int rc = app.exit(e);
            return rc == 0 ? 0 : 2;
        }
        gen.has_caption = cap->count() > 0;

        if (c_sim->parsed()) return cmd_simulate(sim);
        if (c_ct->parsed()) return cmd_train(tr_codec, true);
        if (c_lt->parsed()) return cmd_train(tr_lm, false);
        if (c_tok->parsed()) return cmd_tokenize(tok_ckpt, tok_in, tok_out);
        if (c_det->parsed()) return cmd_detokenize(det_ckpt, det_in, det_out);
        if (c_gen->parsed()) return cmd_generate(gen);
        if (c_ev->parsed()) return cmd_evaluate(ev_pairs, ev_out);
        if (c_bk->parsed()) return cmd_backend(force_name);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const TemplateError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const TrainingFault& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace utka::cli

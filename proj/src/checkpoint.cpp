#include "utka/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace utka::checkpoint {

namespace {

namespace sg = utka::seqgrammar;

// ---- little-endian byte stream primitives ----

void put_u8(std::string& b, uint8_t v) { b.push_back(static_cast<char>(v)); }

void put_u16(std::string& b, uint16_t v) {
    for (int i = 0; i < 2; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u32(std::string& b, uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& b, uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& b, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(b, bits);
}

void put_name(std::string& b, const std::string& s) {
    if (s.size() > 255) throw InputError("name too long for checkpoint stream");
    put_u8(b, static_cast<uint8_t>(s.size()));
    b.append(s);
}

struct Reader {
    const std::string& b;
    size_t pos = 0;
    std::string what;  // for error messages

    void need(size_t n) const {
        if (pos + n > b.size()) throw IoError("truncated " + what);
    }
    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(b[pos++]);
    }
    uint16_t u16() {
        need(2);
        uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<uint16_t>(static_cast<uint8_t>(b[pos + i])) << (8 * i);
        pos += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(b[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(b[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() {
        uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string name() {
        size_t n = u8();
        need(n);
        std::string s = b.substr(pos, n);
        pos += n;
        return s;
    }
    bool done() const { return pos == b.size(); }
};

std::string slurp(const std::string& path, const std::string& what) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + what + ": " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void spit(const std::string& path, const std::string& bytes, const std::string& what) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot create " + what + ": " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("failed writing " + what + ": " + path);
}

// ---- checkpoint section payloads ----

void put_span(std::string& b, const double* p, size_t n) {
    put_u64(b, n);
    for (size_t i = 0; i < n; ++i) put_f64(b, p[i]);
}

std::vector<double> get_span(Reader& r) {
    uint64_t n = r.u64();
    // cheap sanity bound so a corrupt length fails before exhausting memory
    if (n > (1ull << 32)) throw IoError("implausible array length in " + r.what);
    std::vector<double> v(n);
    for (uint64_t i = 0; i < n; ++i) v[i] = r.f64();
    return v;
}

void put_views(std::string& b, const std::vector<optim::ParamView>& views) {
    put_u16(b, static_cast<uint16_t>(views.size()));
    for (const auto& v : views) {
        put_name(b, v.name);
        put_span(b, v.data, v.size);
    }
}

// restore into freshly built parameters; name and size must agree slot by
// slot, so a layout drift between versions fails loudly
void get_views(Reader& r, std::vector<optim::ParamView> views) {
    size_t count = r.u16();
    if (count != views.size())
        throw IoError(r.what + " holds " + std::to_string(count) + " arrays, expected " +
                      std::to_string(views.size()));
    for (auto& v : views) {
        std::string name = r.name();
        if (name != v.name)
            throw IoError(r.what + " layout mismatch: found \"" + name + "\", expected \"" +
                          v.name + "\"");
        std::vector<double> data = get_span(r);
        if (data.size() != v.size)
            throw IoError(r.what + " array \"" + name + "\" has wrong size");
        std::memcpy(v.data, data.data(), data.size() * sizeof(double));
    }
}

std::string encode_codec_cfg(const codec::CodecConfig& c) {
    std::string b;
    put_u32(b, static_cast<uint32_t>(c.sample_rate));
    put_u32(b, static_cast<uint32_t>(c.downsample_ratio));
    put_u32(b, static_cast<uint32_t>(c.hidden_dim));
    put_u32(b, static_cast<uint32_t>(c.ssl_dim));
    put_u32(b, static_cast<uint32_t>(c.quant_dim));
    put_u32(b, static_cast<uint32_t>(c.codebook_size));
    put_u32(b, static_cast<uint32_t>(c.fft_size));
    put_u32(b, static_cast<uint32_t>(c.fft_hop));
    put_f64(b, c.lambda_commit);
    put_f64(b, c.lambda_mel);
    put_f64(b, c.lambda_aux);
    put_f64(b, c.lambda_adv);
    put_f64(b, c.lambda_fm);
    return b;
}

codec::CodecConfig decode_codec_cfg(Reader& r) {
    codec::CodecConfig c;
    c.sample_rate = static_cast<int>(r.u32());
    c.downsample_ratio = static_cast<int>(r.u32());
    c.hidden_dim = static_cast<int>(r.u32());
    c.ssl_dim = static_cast<int>(r.u32());
    c.quant_dim = static_cast<int>(r.u32());
    c.codebook_size = static_cast<int>(r.u32());
    c.fft_size = static_cast<int>(r.u32());
    c.fft_hop = static_cast<int>(r.u32());
    c.lambda_commit = r.f64();
    c.lambda_mel = r.f64();
    c.lambda_aux = r.f64();
    c.lambda_adv = r.f64();
    c.lambda_fm = r.f64();
    return c;
}

void put_stack(std::string& b, const quantize::RvqStack& s) {
    put_u16(b, static_cast<uint16_t>(s.n_layers()));
    for (const auto& layer : s.layers) {
        put_u32(b, static_cast<uint32_t>(layer.size()));
        put_u32(b, static_cast<uint32_t>(layer.dim()));
        put_span(b, layer.entries.data(), layer.entries.size());
        put_span(b, layer.usage_ema.data(), layer.usage_ema.size());
        put_span(b, layer.entry_ema.data(), layer.entry_ema.size());
    }
}

void get_stack(Reader& r, quantize::RvqStack& s, const std::string& which) {
    size_t n = r.u16();
    if (static_cast<int>(n) != s.n_layers())
        throw IoError(r.what + ": " + which + " stack depth disagrees with the stored config");
    for (auto& layer : s.layers) {
        int size = static_cast<int>(r.u32());
        int dim = static_cast<int>(r.u32());
        if (size != layer.size() || dim != layer.dim())
            throw IoError(r.what + ": " + which + " codebook shape disagrees with the stored config");
        std::vector<double> entries = get_span(r);
        std::vector<double> usage = get_span(r);
        std::vector<double> sums = get_span(r);
        if (entries.size() != layer.entries.size() || usage.size() != layer.usage_ema.size() ||
            sums.size() != layer.entry_ema.size())
            throw IoError(r.what + ": " + which + " codebook payload has wrong size");
        std::memcpy(layer.entries.data(), entries.data(), entries.size() * sizeof(double));
        layer.usage_ema = usage;
        std::memcpy(layer.entry_ema.data(), sums.data(), sums.size() * sizeof(double));
    }
}

std::string encode_lm_cfg(const lm::LMConfig& c) {
    std::string b;
    put_u32(b, static_cast<uint32_t>(c.depth));
    put_u32(b, static_cast<uint32_t>(c.embed));
    put_u32(b, static_cast<uint32_t>(c.heads));
    put_u32(b, static_cast<uint32_t>(c.head_vocab));
    put_u32(b, static_cast<uint32_t>(c.ssl_dim));
    put_u32(b, static_cast<uint32_t>(c.max_seq));
    return b;
}

lm::LMConfig decode_lm_cfg(Reader& r) {
    lm::LMConfig c;
    c.depth = static_cast<int>(r.u32());
    c.embed = static_cast<int>(r.u32());
    c.heads = static_cast<int>(r.u32());
    c.head_vocab = static_cast<int>(r.u32());
    c.ssl_dim = static_cast<int>(r.u32());
    c.max_seq = static_cast<int>(r.u32());
    return c;
}

void put_adamw(std::string& b, const optim::AdamW& o) {
    put_f64(b, o.beta1);
    put_f64(b, o.beta2);
    put_f64(b, o.eps);
    put_f64(b, o.weight_decay);
    put_u64(b, static_cast<uint64_t>(o.step));
    put_span(b, o.m.data(), o.m.size());
    put_span(b, o.v.data(), o.v.size());
}

void get_adamw(Reader& r, optim::AdamW& o) {
    o.beta1 = r.f64();
    o.beta2 = r.f64();
    o.eps = r.f64();
    o.weight_decay = r.f64();
    o.step = static_cast<int64_t>(r.u64());
    o.m = get_span(r);
    o.v = get_span(r);
    if (o.m.size() != o.v.size()) throw IoError(r.what + ": optimizer moment sizes disagree");
}

}  // namespace

// ---- token files ----

void write_tokens(const std::string& path, const std::vector<sg::TokenGrid>& streams) {
    if (streams.size() > 0xffff) throw InputError("too many token streams for one file");
    std::string b;
    b.append("UTKA");
    put_u16(b, kTokenVersion);
    put_u16(b, static_cast<uint16_t>(streams.size()));
    for (const auto& g : streams) {
        if (g.steps < 0 || static_cast<size_t>(g.steps) * sg::TokenGrid::kLayers != g.cells.size())
            throw InputError("token grid cell count disagrees with its step count");
        put_u8(b, static_cast<uint8_t>(g.kind));
        put_f64(b, g.rate);
        put_u32(b, static_cast<uint32_t>(g.steps));
        for (int layer = 0; layer < sg::TokenGrid::kLayers; ++layer) {
            for (int t = 0; t < g.steps; ++t) {
                int32_t v = g.at(t, layer);
                if (v < 0 || v > kMaxTokenIndex)
                    throw InputError("token index " + std::to_string(v) + " out of range");
                put_u16(b, static_cast<uint16_t>(v));
            }
        }
    }
    spit(path, b, "token file");
}

std::vector<sg::TokenGrid> read_tokens(const std::string& path) {
    std::string bytes = slurp(path, "token file");
    Reader r{bytes, 0, "token file"};
    r.need(4);
    if (bytes.compare(0, 4, "UTKA") != 0) throw IoError("not a token file: " + path);
    r.pos = 4;
    uint16_t version = r.u16();
    if (version != kTokenVersion)
        throw IoError("unsupported token file version " + std::to_string(version));
    size_t count = r.u16();
    std::vector<sg::TokenGrid> streams;
    streams.reserve(count);
    for (size_t i = 0; i < count; ++i) {
        uint8_t kind = r.u8();
        if (kind > static_cast<uint8_t>(sg::GridKind::delayed))
            throw IoError("token file carries an unknown stream kind");
        double rate = r.f64();
        uint32_t steps = r.u32();
        if (steps > (1u << 24)) throw IoError("implausible step count in token file");
        sg::TokenGrid g(static_cast<int>(steps), rate, static_cast<sg::GridKind>(kind));
        for (int layer = 0; layer < sg::TokenGrid::kLayers; ++layer) {
            for (uint32_t t = 0; t < steps; ++t) {
                uint16_t v = r.u16();
                if (static_cast<int>(v) > kMaxTokenIndex)
                    throw IoError("token file carries an out-of-range index");
                g.at(static_cast<int>(t), layer) = v;
            }
        }
        streams.push_back(std::move(g));
    }
    if (!r.done()) throw IoError("trailing bytes in token file");
    return streams;
}

// ---- checkpoints ----

void save(const std::string& path, const Checkpoint& ck) {
    if (ck.codec.has_value() &&
        (ck.codec->acoustic_vq.n_layers() == 0 || ck.codec->semantic_vq.n_layers() == 0))
        throw InputError("codec checkpoint is missing its quantizer stacks");

    std::vector<std::pair<std::string, std::string>> sections;
    if (!ck.config_echo.empty()) sections.emplace_back("config", ck.config_echo);
    if (ck.codec.has_value()) {
        codec::CodecParams p = *ck.codec;  // param_views needs mutable access
        std::string body = encode_codec_cfg(p.cfg);
        put_views(body, codec::param_views(p));
        sections.emplace_back("codec", std::move(body));
        std::string books;
        put_stack(books, p.acoustic_vq);
        put_stack(books, p.semantic_vq);
        sections.emplace_back("codebooks", std::move(books));
    }
    if (ck.lm.has_value()) {
        lm::LMParams p = *ck.lm;
        std::string body = encode_lm_cfg(p.cfg);
        put_views(body, lm::param_views(p));
        sections.emplace_back("lm", std::move(body));
    }
    if (ck.driver.has_value()) {
        std::string body;
        put_adamw(body, ck.driver->codec_opt);
        put_adamw(body, ck.driver->lm_opt);
        put_u32(body, static_cast<uint32_t>(ck.driver->codec_step));
        put_u32(body, static_cast<uint32_t>(ck.driver->lm_step));
        sections.emplace_back("optimizer", std::move(body));
    }

    std::string b;
    b.append("UTKC");
    put_u16(b, kCheckpointVersion);
    put_u16(b, static_cast<uint16_t>(sections.size()));
    for (const auto& [name, body] : sections) {
        put_name(b, name);
        put_u64(b, body.size());
        b.append(body);
        put_u64(b, fnv1a64(body.data(), body.size()));
    }
    spit(path, b, "checkpoint");
}

Checkpoint load(const std::string& path) {
    std::string bytes = slurp(path, "checkpoint");
    Reader r{bytes, 0, "checkpoint"};
    r.need(4);
    if (bytes.compare(0, 4, "UTKC") != 0) throw IoError("not a checkpoint file: " + path);
    r.pos = 4;
    uint16_t version = r.u16();
    if (version != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    size_t count = r.u16();

    std::map<std::string, std::string> sections;
    for (size_t i = 0; i < count; ++i) {
        std::string name = r.name();
        uint64_t len = r.u64();
        r.need(len);
        std::string body = bytes.substr(r.pos, len);
        r.pos += len;
        uint64_t sum = r.u64();
        if (sum != fnv1a64(body.data(), body.size()))
            throw IoError("checkpoint section \"" + name + "\" fails its checksum");
        if (!sections.emplace(name, std::move(body)).second)
            throw IoError("duplicate checkpoint section \"" + name + "\"");
    }
    if (!r.done()) throw IoError("trailing bytes in checkpoint");
    for (const auto& [name, body] : sections) {
        if (name != "config" && name != "codec" && name != "codebooks" && name != "lm" &&
            name != "optimizer")
            throw IoError("unknown checkpoint section \"" + name + "\"");
    }
    if (sections.count("codec") != sections.count("codebooks"))
        throw IoError("checkpoint carries codec parameters without codebooks, or the reverse");

    Checkpoint ck;
    if (auto it = sections.find("config"); it != sections.end()) ck.config_echo = it->second;

    if (auto it = sections.find("codec"); it != sections.end()) {
        Reader sr{it->second, 0, "checkpoint codec section"};
        codec::CodecConfig cfg = decode_codec_cfg(sr);
        cfg.validate();
        Rng rng(0);
        codec::CodecParams p = codec::CodecParams::make(cfg, rng);
        get_views(sr, codec::param_views(p));
        if (!sr.done()) throw IoError("trailing bytes in checkpoint codec section");

        const std::string& books = sections.at("codebooks");
        Reader br{books, 0, "checkpoint codebook section"};
        get_stack(br, p.acoustic_vq, "acoustic");
        get_stack(br, p.semantic_vq, "semantic");
        if (!br.done()) throw IoError("trailing bytes in checkpoint codebook section");
        ck.codec = std::move(p);
    }

    if (auto it = sections.find("lm"); it != sections.end()) {
        Reader sr{it->second, 0, "checkpoint lm section"};
        lm::LMConfig cfg = decode_lm_cfg(sr);
        cfg.validate();
        Rng rng(0);
        lm::LMParams p = lm::LMParams::make(cfg, rng);
        get_views(sr, lm::param_views(p));
        if (!sr.done()) throw IoError("trailing bytes in checkpoint lm section");
        ck.lm = std::move(p);
    }

    if (auto it = sections.find("optimizer"); it != sections.end()) {
        Reader sr{it->second, 0, "checkpoint optimizer section"};
        pipeline::DriverState st;
        get_adamw(sr, st.codec_opt);
        get_adamw(sr, st.lm_opt);
        st.codec_step = static_cast<int>(sr.u32());
        st.lm_step = static_cast<int>(sr.u32());
        if (!sr.done()) throw IoError("trailing bytes in checkpoint optimizer section");
        ck.driver = std::move(st);
    }
    return ck;
}

}  // namespace utka::checkpoint

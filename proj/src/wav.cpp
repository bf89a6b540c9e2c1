#include "utka/wav.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "utka/common.hpp"

namespace utka::wav {

namespace {

uint32_t rd_u32(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

uint16_t rd_u16(const unsigned char* p) {
    return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

void wr_u32(std::string& s, uint32_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>((v >> 8) & 0xff));
    s.push_back(static_cast<char>((v >> 16) & 0xff));
    s.push_back(static_cast<char>((v >> 24) & 0xff));
}

void wr_u16(std::string& s, uint16_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>((v >> 8) & 0xff));
}

}  // namespace

dsp::AudioBuffer read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open wav file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    size_t n = bytes.size();
    if (n < 12 || std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0)
        throw IoError("not a RIFF/WAVE file: " + path);

    bool have_fmt = false;
    uint16_t format = 0, channels = 0, bits = 0;
    uint32_t rate = 0;
    size_t pos = 12;
    dsp::AudioBuffer out;
    bool have_data = false;
    while (pos + 8 <= n) {
        const unsigned char* ch = p + pos;
        uint32_t size = rd_u32(ch + 4);
        size_t body = pos + 8;
        if (body + size > n) throw IoError("truncated wav chunk in " + path);
        if (std::memcmp(ch, "fmt ", 4) == 0) {
            if (size < 16) throw IoError("malformed fmt chunk in " + path);
            format = rd_u16(p + body);
            channels = rd_u16(p + body + 2);
            rate = rd_u32(p + body + 4);
            bits = rd_u16(p + body + 14);
            have_fmt = true;
        } else if (std::memcmp(ch, "data", 4) == 0) {
            if (!have_fmt) throw IoError("wav data chunk before fmt in " + path);
            if (format != 1 || bits != 16)
                throw IoError("unsupported wav encoding (need 16-bit PCM): " + path);
            if (channels != 1) throw IoError("unsupported channel count (need mono): " + path);
            size_t samples = size / 2;
            out.samples.resize(samples);
            for (size_t i = 0; i < samples; ++i) {
                int16_t v = static_cast<int16_t>(rd_u16(p + body + 2 * i));
                out.samples[i] = static_cast<double>(v) / 32768.0;
            }
            out.sample_rate = static_cast<int>(rate);
            have_data = true;
        }
        pos = body + size + (size & 1);  // chunks are word-aligned
    }
    if (!have_data) throw IoError("wav file has no data chunk: " + path);
    return out;
}

void write(const std::string& path, const dsp::AudioBuffer& audio) {
    std::string s;
    size_t n = audio.samples.size();
    uint32_t data_bytes = static_cast<uint32_t>(n * 2);
    s.reserve(44 + data_bytes);
    s.append("RIFF");
    wr_u32(s, 36 + data_bytes);
    s.append("WAVE");
    s.append("fmt ");
    wr_u32(s, 16);
    wr_u16(s, 1);  // PCM
    wr_u16(s, 1);  // mono
    wr_u32(s, static_cast<uint32_t>(audio.sample_rate));
    wr_u32(s, static_cast<uint32_t>(audio.sample_rate * 2));
    wr_u16(s, 2);
    wr_u16(s, 16);
    s.append("data");
    wr_u32(s, data_bytes);
    for (size_t i = 0; i < n; ++i) {
        double v = audio.samples[i];
        long q = std::lround(v * 32767.0);
        if (q > 32767) q = 32767;
        if (q < -32768) q = -32768;
        wr_u16(s, static_cast<uint16_t>(static_cast<int16_t>(q)));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open file for writing: " + path);
    f.write(s.data(), static_cast<std::streamsize>(s.size()));
    if (!f) throw IoError("failed writing wav file: " + path);
}

}  // namespace utka::wav

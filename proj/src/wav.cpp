#include "cdm/wav.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace cdm {

namespace {

void put_u32(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_u16(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

uint32_t get_u32(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

uint16_t get_u16(const unsigned char* p) {
    return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace

Waveform read_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open wav file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const size_t n = bytes.size();

    if (n < 12 || std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0) {
        throw FormatError("not a RIFF/WAVE file: " + path);
    }

    uint16_t channels = 0;
    uint16_t bits = 0;
    uint16_t format = 0;
    uint32_t sample_rate = 0;
    size_t data_off = 0;
    size_t data_len = 0;

    size_t off = 12;
    while (off + 8 <= n) {
        const uint32_t chunk_len = get_u32(p + off + 4);
        if (std::memcmp(p + off, "fmt ", 4) == 0) {
            if (off + 8 + 16 > n) throw FormatError("truncated fmt chunk: " + path);
            format = get_u16(p + off + 8);
            channels = get_u16(p + off + 10);
            sample_rate = get_u32(p + off + 12);
            bits = get_u16(p + off + 22);
        } else if (std::memcmp(p + off, "data", 4) == 0) {
            data_off = off + 8;
            data_len = chunk_len;
        }
        off += 8 + chunk_len + (chunk_len & 1);
    }

    if (sample_rate == 0 || data_off == 0) throw FormatError("missing fmt/data chunk: " + path);
    if (channels != 1) throw UnsupportedError("only mono wav supported: " + path);
    if (format != 1 || bits != 16) throw UnsupportedError("only PCM16 wav supported: " + path);
    if (data_off + data_len > n) throw FormatError("truncated data chunk: " + path);

    Waveform w;
    w.sample_rate = static_cast<int>(sample_rate);
    const size_t count = data_len / 2;
    w.samples.resize(count);
    for (size_t i = 0; i < count; ++i) {
        const auto raw = static_cast<int16_t>(get_u16(p + data_off + 2 * i));
        w.samples[i] = static_cast<double>(raw) / 32768.0;
    }
    return w;
}

void write_wav(const std::string& path, const Waveform& w) {
    if (w.sample_rate <= 0) throw ArgumentError("sample_rate must be positive");
    for (double s : w.samples) {
        if (!std::isfinite(s)) throw ArgumentError("non-finite sample in waveform");
    }

    const uint32_t n = static_cast<uint32_t>(w.samples.size());
    const uint32_t sr = static_cast<uint32_t>(w.sample_rate);
    std::string out;
    out.reserve(44 + 2 * n);
    out += "RIFF";
    put_u32(out, 36 + 2 * n);
    out += "WAVEfmt ";
    put_u32(out, 16);
    put_u16(out, 1);   // PCM
    put_u16(out, 1);   // mono
    put_u32(out, sr);
    put_u32(out, sr * 2);  // byte rate
    put_u16(out, 2);       // block align
    put_u16(out, 16);      // bits
    out += "data";
    put_u32(out, 2 * n);
    for (double s : w.samples) {
        double q = std::nearbyint(s * 32768.0);
        if (q > 32767.0) q = 32767.0;
        if (q < -32768.0) q = -32768.0;
        put_u16(out, static_cast<uint16_t>(static_cast<int16_t>(q)));
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw FormatError("short write: " + path);
}

}  // namespace cdm

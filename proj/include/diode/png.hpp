#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "diode/common.hpp"

namespace diode {

// Minimal PNG codec for the dataset files: 8-bit grayscale, filter 0,
// zlib stream with stored (uncompressed) deflate blocks. Reads back
// exactly the subset it writes.
namespace png {

namespace detail {

inline uint32_t crc32(const std::vector<uint8_t>& buf) {
    static uint32_t table[256];
    static bool init = false;
    if (!init) {
        for (uint32_t n = 0; n < 256; ++n) {
            uint32_t c = n;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            table[n] = c;
        }
        init = true;
    }
    uint32_t c = 0xFFFFFFFFu;
    for (uint8_t b : buf) c = table[(c ^ b) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

inline uint32_t adler32(const std::vector<uint8_t>& buf) {
    uint32_t a = 1, b = 0;
    for (uint8_t byte : buf) {
        a = (a + byte) % 65521u;
        b = (b + a) % 65521u;
    }
    return (b << 16) | a;
}

inline void putU32BE(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

inline void putChunk(std::vector<uint8_t>& out, const char* type,
                     const std::vector<uint8_t>& payload) {
    putU32BE(out, static_cast<uint32_t>(payload.size()));
    std::vector<uint8_t> body(type, type + 4);
    body.insert(body.end(), payload.begin(), payload.end());
    out.insert(out.end(), body.begin(), body.end());
    putU32BE(out, crc32(body));
}

}  // namespace detail

// Encodes 8-bit grayscale pixels (row-major, h*w entries).
inline std::vector<uint8_t> encodeGray8(const std::vector<uint8_t>& pixels, int width,
                                        int height) {
    if (static_cast<size_t>(width) * height != pixels.size())
        throw UsageError("png: pixel buffer does not match dimensions");
    std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};

    std::vector<uint8_t> ihdr;
    detail::putU32BE(ihdr, static_cast<uint32_t>(width));
    detail::putU32BE(ihdr, static_cast<uint32_t>(height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(0);  // color type: grayscale
    ihdr.push_back(0);  // compression
    ihdr.push_back(0);  // filter
    ihdr.push_back(0);  // interlace
    detail::putChunk(out, "IHDR", ihdr);

    // raw scanlines, filter byte 0 per row
    std::vector<uint8_t> raw;
    raw.reserve(pixels.size() + height);
    for (int y = 0; y < height; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), pixels.begin() + static_cast<size_t>(y) * width,
                   pixels.begin() + static_cast<size_t>(y + 1) * width);
    }

    // zlib stream: header + stored deflate blocks + adler32
    std::vector<uint8_t> z = {0x78, 0x01};
    size_t off = 0;
    while (off < raw.size()) {
        const size_t blockLen = std::min<size_t>(raw.size() - off, 65535);
        const bool last = off + blockLen == raw.size();
        z.push_back(last ? 1 : 0);
        z.push_back(static_cast<uint8_t>(blockLen & 0xFF));
        z.push_back(static_cast<uint8_t>(blockLen >> 8));
        z.push_back(static_cast<uint8_t>(~blockLen & 0xFF));
        z.push_back(static_cast<uint8_t>((~blockLen >> 8) & 0xFF));
        z.insert(z.end(), raw.begin() + off, raw.begin() + off + blockLen);
        off += blockLen;
    }
    detail::putU32BE(z, detail::adler32(raw));
    detail::putChunk(out, "IDAT", z);
    detail::putChunk(out, "IEND", {});
    return out;
}

struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> pixels;
};

inline GrayImage decodeGray8(const std::vector<uint8_t>& file) {
    const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
    if (file.size() < 8 || !std::equal(sig, sig + 8, file.begin()))
        throw UsageError("png: bad signature");
    size_t pos = 8;
    const auto u32 = [&](size_t at) {
        return (static_cast<uint32_t>(file[at]) << 24) | (static_cast<uint32_t>(file[at + 1]) << 16) |
               (static_cast<uint32_t>(file[at + 2]) << 8) | file[at + 3];
    };
    GrayImage img;
    std::vector<uint8_t> idat;
    while (pos + 8 <= file.size()) {
        const uint32_t len = u32(pos);
        const std::string type(file.begin() + pos + 4, file.begin() + pos + 8);
        if (pos + 12 + len > file.size()) throw UsageError("png: truncated chunk");
        const size_t body = pos + 8;
        if (type == "IHDR") {
            img.width = static_cast<int>(u32(body));
            img.height = static_cast<int>(u32(body + 4));
            if (file[body + 8] != 8 || file[body + 9] != 0)
                throw UsageError("png: only 8-bit grayscale supported");
        } else if (type == "IDAT") {
            idat.insert(idat.end(), file.begin() + body, file.begin() + body + len);
        } else if (type == "IEND") {
            break;
        }
        pos += 12 + len;
    }
    if (img.width <= 0 || img.height <= 0) throw UsageError("png: missing IHDR");
    if (idat.size() < 2) throw UsageError("png: missing IDAT");

    // inflate, stored blocks only
    std::vector<uint8_t> raw;
    size_t zp = 2;
    while (true) {
        if (zp >= idat.size()) throw UsageError("png: truncated deflate stream");
        const uint8_t header = idat[zp++];
        if ((header & 0x06) != 0) throw UsageError("png: only stored deflate blocks supported");
        const uint16_t blockLen =
            static_cast<uint16_t>(idat[zp]) | (static_cast<uint16_t>(idat[zp + 1]) << 8);
        zp += 4;
        raw.insert(raw.end(), idat.begin() + zp, idat.begin() + zp + blockLen);
        zp += blockLen;
        if (header & 1) break;
    }

    const size_t rowBytes = static_cast<size_t>(img.width) + 1;
    if (raw.size() != rowBytes * img.height) throw UsageError("png: scanline size mismatch");
    img.pixels.reserve(static_cast<size_t>(img.width) * img.height);
    for (int y = 0; y < img.height; ++y) {
        if (raw[y * rowBytes] != 0) throw UsageError("png: only filter 0 supported");
        img.pixels.insert(img.pixels.end(), raw.begin() + y * rowBytes + 1,
                          raw.begin() + (y + 1) * rowBytes);
    }
    return img;
}

inline void writeFile(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw UsageError("cannot write file: " + path);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<uint8_t> readFile(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw UsageError("cannot read file: " + path);
    return std::vector<uint8_t>(std::istreambuf_iterator<char>(is), {});
}

}  // namespace png
}  // namespace diode

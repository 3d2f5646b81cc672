#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "aal/error.hpp"
#include "aal/image.hpp"

namespace aal {

/// Writes a binary PGM (1 channel) or PPM (3 channels).
inline void write_pnm(const ImageTensor& img, const std::filesystem::path& path) {
    require(img.channels() == 1 || img.channels() == 3, "write_pnm: only 1 or 3 channels supported");
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot write " + path.string());
    }
    out << (img.channels() == 1 ? "P5" : "P6") << "\n" << img.width() << " " << img.height() << "\n255\n";
    for (const float v : img.pixels()) {
        const auto b = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
        out.put(static_cast<char>(b));
    }
    if (!out) {
        throw Error("write failed: " + path.string());
    }
}

}  // namespace aal

#pragma once

#include <string>

#include "utka/dsp.hpp"

namespace utka::wav {

// 16-bit PCM mono RIFF only; anything else is an I/O format error.
dsp::AudioBuffer read(const std::string& path);
void write(const std::string& path, const dsp::AudioBuffer& audio);

}  // namespace utka::wav

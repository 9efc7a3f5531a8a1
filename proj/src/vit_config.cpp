// SPDX-License-Identifier: Apache-2.0
#include "bsr/vit_config.hpp"

#include <sstream>

#include "bsr/errors.hpp"
#include "bsr/kv_text.hpp"

namespace bsr {

void ViTConfig::validate() const {
  if (image_size == 0 || patch_size == 0 || channels == 0 || embed == 0 || heads == 0 || ffn_mult == 0 ||
      depth == 0 || num_classes == 0) {
    throw DimensionError("config extents must be positive");
  }
  if (image_size % patch_size != 0) {
    throw DimensionError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                         std::to_string(patch_size));
  }
  if (embed % heads != 0) {
    throw DimensionError("embed " + std::to_string(embed) + " is not divisible by heads " + std::to_string(heads));
  }
  if (embed < 2) {
    throw DimensionError("embed must be at least 2");
  }
}

ViTConfig deit_small() { return ViTConfig{224, 16, 3, 384, 6, 4, 12, 100}; }

ViTConfig vit_base() { return ViTConfig{224, 16, 3, 768, 12, 4, 12, 100}; }

ViTConfig toy_config() { return ViTConfig{16, 4, 3, 32, 2, 4, 4, 4}; }

ViTConfig parse_config(std::string_view text) {
  ViTConfig c;
  for (const auto& [key, value] : parse_key_values(text)) {
    if (key == "image_size") {
      c.image_size = parse_count(key, value);
    } else if (key == "patch_size") {
      c.patch_size = parse_count(key, value);
    } else if (key == "channels") {
      c.channels = parse_count(key, value);
    } else if (key == "embed") {
      c.embed = parse_count(key, value);
    } else if (key == "heads") {
      c.heads = parse_count(key, value);
    } else if (key == "ffn_mult") {
      c.ffn_mult = parse_count(key, value);
    } else if (key == "depth") {
      c.depth = parse_count(key, value);
    } else if (key == "num_classes") {
      c.num_classes = parse_count(key, value);
    } else {
      throw FormatError("unknown config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

std::string format_config(const ViTConfig& c) {
  std::ostringstream os;
  os << "image_size = " << c.image_size << "\npatch_size = " << c.patch_size << "\nchannels = " << c.channels
     << "\nembed = " << c.embed << "\nheads = " << c.heads << "\nffn_mult = " << c.ffn_mult
     << "\ndepth = " << c.depth << "\nnum_classes = " << c.num_classes << '\n';
  return os.str();
}

ViTConfig resolve_config(std::string_view preset_or_path) {
  if (preset_or_path == "deit-s") {
    return deit_small();
  }
  if (preset_or_path == "vit-b") {
    return vit_base();
  }
  if (preset_or_path == "toy") {
    return toy_config();
  }
  return parse_config(read_text_file(std::string(preset_or_path)));
}

}  // namespace bsr

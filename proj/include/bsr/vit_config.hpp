// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <string_view>

namespace bsr {

/// Architecture hyperparameters of a Vision Transformer.
struct ViTConfig {
  std::size_t image_size = 224;
  std::size_t patch_size = 16;
  std::size_t channels = 3;
  std::size_t embed = 384;  // L
  std::size_t heads = 6;    // H
  std::size_t ffn_mult = 4;
  std::size_t depth = 12;
  std::size_t num_classes = 100;

  std::size_t patches_per_side() const noexcept { return image_size / patch_size; }
  /// N, image tokens.
  std::size_t num_patches() const noexcept { return patches_per_side() * patches_per_side(); }
  /// N + 1, image tokens plus the class token.
  std::size_t tokens() const noexcept { return num_patches() + 1; }
  std::size_t head_dim() const noexcept { return embed / heads; }
  std::size_t hidden() const noexcept { return embed * ffn_mult; }
  std::size_t patch_dim() const noexcept { return patch_size * patch_size * channels; }

  /// Throws DimensionError when extents are inconsistent.
  void validate() const;

  friend bool operator==(const ViTConfig&, const ViTConfig&) = default;
};

ViTConfig deit_small();
ViTConfig vit_base();
/// Desk-scale model: 16x16x3 images, 4x4 patches (N=16), L=32, H=2, depth 4.
ViTConfig toy_config();

/// "deit-s", "vit-b", "toy", or a path to a `key = value` config file.
ViTConfig resolve_config(std::string_view preset_or_path);
ViTConfig parse_config(std::string_view text);
std::string format_config(const ViTConfig& config);

}  // namespace bsr

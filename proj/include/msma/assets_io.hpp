// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

// File codecs shared by the command-line tool and the tests. Text formats
// are locale-independent; binary formats are little-endian. Every reader
// reports malformed input as ParseError("path:location: message") and
// never returns a partially filled object. Byte-level grammars live in
// docs/formats.md.

#pragma once

#include <string>
#include <string_view>

#include "msma/evaluation.hpp"
#include "msma/fitting.hpp"
#include "msma/image.hpp"
#include "msma/morphable_model.hpp"
#include "msma/network.hpp"

namespace msma {

/// Whole-file helpers; IoError when the file cannot be opened or written.
std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

// Images: binary PPM (P6, maxval 1..255) always; PNG when built with
// MSMA_ENABLE_PNG. Decoding yields values in [0, 1].
Image decode_ppm(std::string_view bytes, const std::string& path = "<memory>");
std::string encode_ppm(const Image& image);
/// Reads PPM, or PNG when support is compiled in (detected by signature).
Image read_image(const std::string& path);
/// Writes PNG when the path ends in ".png" (and support is compiled in),
/// PPM otherwise. Values are clamped to [0, 1] and rounded to 8 bits.
void write_image(const Image& image, const std::string& path);
bool png_supported();

// Masks: binary PGM (P5), maxval 1..65535 (16-bit samples big-endian as
// the format prescribes); weight = sample / maxval.
SkinMask decode_pgm_mask(std::string_view bytes, const std::string& path = "<memory>");
std::string encode_pgm_mask(const SkinMask& mask);
SkinMask read_mask(const std::string& path);
void write_mask(const SkinMask& mask, const std::string& path);
/// ParseError naming the mask file when its size differs from the image.
void check_mask_matches(const SkinMask& mask, const Image& image, const std::string& mask_path);

// Meshes: Wavefront OBJ subset. "v x y z [...]" and "f i j k [...]" records
// with 1-based or negative (relative) indices and optional "/vt/vn" parts;
// polygons are fan-triangulated; other record types are ignored.
Mesh parse_obj(std::string_view text, const std::string& path = "<memory>");
std::string format_obj(const Mesh& mesh);
Mesh read_obj(const std::string& path);
void write_obj(const Mesh& mesh, const std::string& path);

// Landmarks: exactly 68 non-empty lines of "x y" pixel coordinates.
Points2 parse_landmarks(std::string_view text, const std::string& path = "<memory>");
std::string format_landmarks(const Points2& landmarks);
Points2 read_landmarks(const std::string& path);
void write_landmarks(const Points2& landmarks, const std::string& path);

// Fit configuration: JSON object mirroring FitConfig, with nested
// "loss_weights" and "lr_scales" objects. Missing keys keep defaults;
// unknown keys and wrongly typed values are rejected by name.
FitConfig parse_config(std::string_view text, const std::string& path = "<memory>");
std::string format_config(const FitConfig& config);
FitConfig read_config(const std::string& path);
void write_config(const FitConfig& config, const std::string& path);

// Coefficients: JSON object of named arrays alpha, beta, gamma, rotation,
// translation, delta. Doubles are printed in shortest round-trip form, so
// write -> read is bitwise exact.
FaceCoefficients parse_coefficients(std::string_view text, const std::string& path = "<memory>");
std::string format_coefficients(const FaceCoefficients& coefficients);
FaceCoefficients read_coefficients(const std::string& path);
void write_coefficients(const FaceCoefficients& coefficients, const std::string& path);

// Face basis: "MFB1" binary container.
FaceBasis decode_basis(std::string_view bytes, const std::string& path = "<memory>");
std::string encode_basis(const FaceBasis& basis);
FaceBasis read_basis(const std::string& path);
void write_basis(const FaceBasis& basis, const std::string& path);

// Network parameters: "MSMA" checkpoint, blocks in for_each_parameter
// order. Loading requires the same names and dimensions as `params`.
inline constexpr std::uint8_t kCheckpointVersion = 1;
std::string encode_checkpoint(const NetworkParams& params);
void decode_checkpoint(std::string_view bytes, NetworkParams& params,
                       const std::string& path = "<memory>");
void write_checkpoint(const NetworkParams& params, const std::string& path);
void read_checkpoint(const std::string& path, NetworkParams& params);

// Fit trace: CSV with header
// iteration,total,pho,per,lmk,3dmm,refl,gradient_norm,learning_rate; term
// columns hold weighted contributions, which sum to total.
std::string format_trace_csv(const FitTrace& trace);
void write_trace_csv(const FitTrace& trace, const std::string& path);

/// Shortest decimal text that parses back to exactly `value`.
std::string format_double(double value);

}  // namespace msma

#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace stalab {

std::string sha256_hex(std::string_view bytes);
/// Throws MissingArtifact when the file cannot be read.
std::string sha256_file(const std::filesystem::path& path);

} // namespace stalab

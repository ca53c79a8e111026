#pragma once

#include <string>

#include "enprompt/matrix.hpp"
#include "enprompt/tape.hpp"
#include "json.hpp"

namespace enprompt {

// Doubles are written with enough digits to round-trip exactly.
nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

nlohmann::json registry_to_json(const ParameterRegistry& registry);
ParameterRegistry registry_from_json(const nlohmann::json& j);

// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::string& path, const std::string& contents);
// Throws ResourceError when the file cannot be read.
std::string read_file(const std::string& path);

}  // namespace enprompt

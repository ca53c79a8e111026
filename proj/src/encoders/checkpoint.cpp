#include "enprompt/checkpoint.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "enprompt/errors.hpp"

namespace enprompt {
namespace {

Role role_from_string(const std::string& name) {
  for (Role r : {Role::embedding, Role::feature, Role::weight, Role::cost, Role::plan}) {
    if (name == to_string(r)) return r;
  }
  throw ConfigError("unknown matrix role '" + name + "'");
}

}  // namespace

nlohmann::json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()},
          {"cols", m.cols()},
          {"role", to_string(m.role())},
          {"values", std::vector<double>(m.values().begin(), m.values().end())}};
}

Matrix matrix_from_json(const nlohmann::json& j) {
  try {
    const auto rows = j.at("rows").get<std::size_t>();
    const auto cols = j.at("cols").get<std::size_t>();
    auto values = j.at("values").get<std::vector<double>>();
    if (values.size() != rows * cols) {
      throw ConfigError("matrix header " + std::to_string(rows) + "x" + std::to_string(cols) +
                        " does not match " + std::to_string(values.size()) + " values");
    }
    return Matrix(rows, cols, std::move(values), role_from_string(j.at("role")));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed matrix record: ") + e.what());
  }
}

nlohmann::json registry_to_json(const ParameterRegistry& registry) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& p : registry.entries()) {
    nlohmann::json entry = matrix_to_json(p.value);
    entry["name"] = p.name;
    entry["frozen"] = p.frozen;
    out.push_back(std::move(entry));
  }
  return out;
}

ParameterRegistry registry_from_json(const nlohmann::json& j) {
  ParameterRegistry out;
  try {
    for (const auto& entry : j) {
      out.add(entry.at("name").get<std::string>(), matrix_from_json(entry),
              entry.at("frozen").get<bool>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed parameter record: ") + e.what());
  }
  return out;
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  std::error_code ec;
  if (target.has_parent_path()) fs::create_directories(target.parent_path(), ec);
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ResourceError("cannot write '" + tmp.string() + "'");
    out << contents;
    out.flush();
    if (!out) throw ResourceError("short write to '" + tmp.string() + "'");
  }
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw ResourceError("cannot move output into '" + path + "'");
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ResourceError("cannot read '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace enprompt

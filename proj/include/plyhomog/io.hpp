#pragma once

#include "config.hpp"
#include "harness.hpp"

#include <filesystem>

namespace plyhomog {

namespace fs = std::filesystem;

struct ManifestEntry {
  std::string file;
  std::string sha256;
  std::size_t bytes = 0;
};

struct Manifest {
  std::string dir;
  std::vector<ManifestEntry> files;
  const ManifestEntry* find(const std::string& name) const {
    for (const auto& f : files)
      if (f.file == name) return &f;
    return nullptr;
  }
};

inline void write_text_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw error(errc::io_error, "cannot open " + p.string() + " for writing");
  out.write(text.data(), std::streamsize(text.size()));
  if (!out) throw error(errc::io_error, "failed writing " + p.string());
}

inline std::string read_text_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw error(errc::io_error, "cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw error(errc::io_error, "cannot create directory " + p.string());
}

/// <id>.csv, <id>.gp, summary.json and manifest.json; a report without columns gets the summary only.
inline Manifest write_outputs(const StudyReport& report, const std::string& dir,
                              const nlohmann::json& extra = nlohmann::json::object()) {
  ensure_dir(dir);
  Manifest m;
  m.dir = dir;
  auto emit = [&](const std::string& name, const std::string& text) {
    write_text_file(fs::path(dir) / name, text);
    m.files.push_back({name, sha256_hex(text), text.size()});
  };
  if (!report.columns.empty()) {
    const std::string base = report.id.empty() ? "report" : report.id;
    emit(base + ".csv", report.csv());
    emit(base + ".gp", report.gnuplot(base + ".csv"));
  }
  nlohmann::json summary = report.summary();
  for (const auto& [k, v] : extra.items()) summary[k] = v;
  emit("summary.json", summary.dump(2) + "\n");
  nlohmann::json man;
  man["files"] = nlohmann::json::array();
  for (const auto& f : m.files) man["files"].push_back({{"file", f.file}, {"sha256", f.sha256}, {"bytes", f.bytes}});
  write_text_file(fs::path(dir) / "manifest.json", man.dump(2) + "\n");
  return m;
}

// ---------------------------------------------------------------------------
// reading back

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw error(errc::validation_error, "no column " + name);
  }
  double number(std::size_t row, const std::string& name) const {
    const std::string& s = rows.at(row).at(column(name));
    double v = 0.0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
      throw error(errc::parse_error, "row " + std::to_string(row + 2) + ": '" + s + "' is not a number");
    return v;
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t p = line.find(',', start);
    out.push_back(line.substr(start, p == std::string::npos ? std::string::npos : p - start));
    if (p == std::string::npos) break;
    start = p + 1;
  }
  return out;
}

inline CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find('\r') != std::string::npos || line.find('"') != std::string::npos)
      throw error(errc::parse_error, "csv line " + std::to_string(line_no) + ": unsupported character");
    auto cells = split_csv_line(line);
    if (line_no == 1) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size())
      throw error(errc::parse_error, "csv line " + std::to_string(line_no) + ": expected " +
                                         std::to_string(t.header.size()) + " fields");
    t.rows.push_back(std::move(cells));
  }
  if (t.header.empty()) throw error(errc::parse_error, "csv has no header");
  return t;
}

inline CsvTable read_csv(const std::string& path) { return parse_csv(read_text_file(path)); }

inline Manifest read_manifest(const std::string& dir) {
  Manifest m;
  m.dir = dir;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(fs::path(dir) / "manifest.json"));
    for (const auto& f : j.at("files"))
      m.files.push_back({f.at("file").get<std::string>(), f.at("sha256").get<std::string>(), f.at("bytes").get<std::size_t>()});
  } catch (const nlohmann::json::exception& e) {
    throw error(errc::io_error, std::string("bad manifest: ") + e.what());
  }
  return m;
}

}  // namespace plyhomog

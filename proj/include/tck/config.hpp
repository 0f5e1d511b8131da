#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "tck/trainer.hpp"

namespace tck {

// Flat "section.key" settings with registered defaults. Files are INI; keys
// outside the registry are rejected with ConfigError.
class Settings {
 public:
  Settings();

  void load_file(const std::filesystem::path& path);
  void load_text(const std::string& text, const std::string& origin = "<text>");
  // "key=value" with key either "section.key" or a top-level key.
  void apply_override(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  int get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<double> get_doubles(const std::string& key) const;

  // Sorted "key = value" lines: the effective configuration.
  std::string echo() const;
  // Hex prefix of the SHA-256 of echo().
  std::string hash() const;

  static std::vector<std::string> known_keys();

 private:
  std::map<std::string, std::string> values_;
};

WorldConfig world_config(const Settings& s);
WorkbenchConfig workbench_config(const Settings& s);
CodecConfig codec_config(const Settings& s);
RDConfig rd_config(const Settings& s);
ExperimentConfig experiment_config(const Settings& s);
ExperimentPlan plan_config(const Settings& s);

// "scene+object" -> {scene, object}
std::vector<TaskId> parse_task_group(const std::string& text);
// "scene+object,segment" -> {{scene, object}, {segment}}
std::vector<std::vector<TaskId>> parse_task_groups(const std::string& text);

}  // namespace tck

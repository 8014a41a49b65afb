#include <plyhomog/commands.hpp>

#include <CLI11.hpp>

using namespace plyhomog;

int main(int argc, char** argv) {
  CLI::App app{"plyhomog: plywood microstructure homogenization studies"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  for (const auto& name : command_names()) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("config", config_path, "YAML run configuration")->required();
    sub->add_option("--seed", seed, "override io.seed");
    sub->add_option("--out", out, "override io.output_dir");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    RunConfig cfg = parse_config(config_path);
    if (seed) cfg.io.seed = *seed;
    if (out) cfg.io.output_dir = *out;
    try {
      const CommandResult res = run_command(cfg, command);
      std::cout << "output: " << res.dir << '\n';
      if (res.extra.contains("anchors")) {
        const auto& a = res.extra["anchors"];
        std::cout << (a["cache_hit"].get<bool>() ? "cache-hit" : "cache-miss") << ": " << a["cached"] << " cached, "
                  << a["solved"] << " solved, " << a["shared"] << " shared\n";
      }
      for (const auto& v : res.report.verdicts)
        std::cout << (v.pass ? "PASS " : "FAIL ") << v.criterion << ' ' << v.check << " value=" << format_double(v.value)
                  << " threshold=" << format_double(v.threshold) << '\n';
      return 0;
    } catch (const error& e) {
      // leave the error next to where the outputs would have gone
      const auto j = error_json(e, command);
      std::error_code ec;
      const fs::path dir = output_dir_for(cfg, command);
      fs::create_directories(dir, ec);
      if (!ec) std::ofstream(dir / "error.json") << j.dump(2) << '\n';
      std::cerr << j.dump() << '\n';
      return exit_code(e.code());
    }
  } catch (const error& e) {
    std::cerr << error_json(e, command).dump() << '\n';
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", "InternalError"}, {"message", e.what()}, {"command", command}, {"exit_code", 3}}.dump()
              << '\n';
    return 3;
  }
}

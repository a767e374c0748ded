#include "vlseg/sweep.hpp"

#include <algorithm>
#include <sstream>

#include "vlseg/error.hpp"
#include "vlseg/safetensors.hpp"
#include "vlseg/trainer.hpp"

namespace vlseg {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string value_tag(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

int64_t confident_pixels(const std::map<std::string, DensePseudoLabel>& labels, double zeta) {
  int64_t count = 0;
  for (const auto& [id, label] : labels) count += (label.confidence >= zeta).sum().item<int64_t>();
  return count;
}

}  // namespace

json SweepResult::to_json() const {
  json cells_json = json::array();
  for (const auto& c : cells) {
    cells_json.push_back({{"param", c.param},
                          {"value", c.value},
                          {"miou", c.miou},
                          {"mean_masked_frac_zeta", c.mean_masked_frac_zeta},
                          {"guide_pixels", c.guide_pixels},
                          {"output_dir", c.output_dir.string()}});
  }
  json j = {{"param", param}, {"cells", cells_json}};
  if (zeta_monotone) j["zeta_monotone"] = *zeta_monotone;
  return j;
}

void set_sweep_param(TrainConfig& config, const std::string& param, double value) {
  if (param == "lambda_dc0") {
    config.loss.lambda_dc0 = value;
  } else if (param == "zeta") {
    config.loss.zeta = value;
  } else if (param == "tau") {
    config.loss.tau = value;
  } else {
    throw ConfigError("cannot sweep '" + param + "' (choose lambda_dc0, zeta or tau)");
  }
  config.validate();
}

SweepResult run_sweep(const TrainConfig& base, const std::string& param, const std::vector<double>& values) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  SweepResult result;
  result.param = param;
  auto shared = base;
  if (shared.guidance_cache.empty()) shared.guidance_cache = base.output_dir / "guidance_cache";

  std::map<std::string, DensePseudoLabel> labels;
  if (shared.semi_supervised && shared.use_guidance) {
    auto inputs = prepare_model_inputs(shared);
    auto split = load_split(read_split(shared.data.root));
    labels = precompute_guidance(shared, inputs, split.unlabeled);
  }

  for (double v : values) {
    auto cfg = shared;
    set_sweep_param(cfg, param, v);
    cfg.output_dir = base.output_dir / (param + "_" + value_tag(v));
    log_info("sweep " + param + "=" + value_tag(v));
    auto fit_result = fit(cfg);
    SweepCell cell;
    cell.param = param;
    cell.value = v;
    cell.output_dir = cfg.output_dir;
    if (fit_result.final_report) cell.miou = fit_result.final_report->miou;
    if (!fit_result.losses.empty()) {
      double sum = 0.0;
      for (const auto& r : fit_result.losses) sum += r.masked_frac_zeta;
      cell.mean_masked_frac_zeta = sum / static_cast<double>(fit_result.losses.size());
    }
    cell.guide_pixels = confident_pixels(labels, cfg.loss.zeta);
    result.cells.push_back(cell);
  }

  if (param == "zeta") {
    auto sorted = result.cells;
    std::stable_sort(sorted.begin(), sorted.end(), [](const SweepCell& a, const SweepCell& b) { return a.value < b.value; });
    bool monotone = true;
    for (std::size_t i = 1; i < sorted.size(); ++i) monotone = monotone && sorted[i].guide_pixels <= sorted[i - 1].guide_pixels;
    result.zeta_monotone = monotone;
  }

  std::ostringstream csv;
  csv << "param,value,miou,mean_masked_frac_zeta,guide_pixels\n";
  for (const auto& c : result.cells)
    csv << c.param << ',' << value_tag(c.value) << ',' << c.miou << ',' << c.mean_masked_frac_zeta << ','
        << c.guide_pixels << '\n';
  fs::create_directories(base.output_dir);
  atomic_write(base.output_dir / "sweep.csv", csv.str());
  atomic_write(base.output_dir / "sweep.json", result.to_json().dump(2) + "\n");
  return result;
}

}  // namespace vlseg

#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace vlseg {

struct ResultRow {
  std::string method;
  std::string net;
  std::string dataset;
  std::string split_fraction;
  int64_t label_count = 0;
  double miou = 0.0;
  std::string miou_text;  // as written in the source table, e.g. "84.0"
};

// Published mIoU numbers as a CSV with the header
// method,net,dataset,split_fraction,label_count,miou (net, dataset and
// split_fraction may be omitted).
struct ResultsTable {
  std::vector<ResultRow> rows;

  // label_count > 0 and miou in [0, 100]; throws ValidationError otherwise.
  void validate() const;
  ResultsTable filter_dataset(const std::string& dataset) const;
  // Methods in order of first appearance.
  std::vector<std::string> methods() const;
};

ResultsTable read_results_table(const std::filesystem::path& path);
void write_results_table(const std::filesystem::path& path, const ResultsTable& table);

struct PlotOutputs {
  std::filesystem::path svg;
  std::filesystem::path data;  // sidecar CSV: method,label_count,miou
};

// mIoU against label count on a log axis, one series per method. Writes an SVG
// and a CSV of the plotted points next to it. Throws ConfigError on an empty table.
PlotOutputs plot_label_curves(const ResultsTable& table, const std::filesystem::path& svg_path,
                              const std::string& title = "");

}  // namespace vlseg

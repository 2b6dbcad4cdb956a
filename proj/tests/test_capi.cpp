#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "derfkit.h"

#include <json.hpp>

#include <cmath>
#include <string>
#include <unistd.h>

using nlohmann::json;

namespace {

std::string take(char* s) {
    REQUIRE(s != nullptr);
    std::string out(s);
    derfkit_string_free(s);
    return out;
}

std::string temp_path(const char* stem) {
    return std::string("/tmp/derfkit_capi_") + stem + "_" + std::to_string(getpid());
}

json tiny_train_spec() {
    return json{
        {"model",
         {{"depth", 1},
          {"d_model", 8},
          {"n_heads", 2},
          {"d_ff", 16},
          {"seq_len", 4},
          {"n_classes", 2},
          {"c_in", 4},
          {"norm_slot", {{"kind", "derf"}}},
          {"seed", 5}}},
        {"optimizer", {{"kind", "adamw"}, {"lr", 3e-3}}},
        {"steps", 6},
        {"batch_size", 32},
        {"warmup_steps", 2},
        {"dataset",
         {{"kind", "cluster_tokens"},
          {"n", 128},
          {"seq_len", 4},
          {"c_in", 4},
          {"n_classes", 2},
          {"margin", 3.0},
          {"seed", 21}}},
        {"master_seed", 77},
    };
}

} // namespace

TEST_CASE("identity calls") {
    CHECK(std::string(derfkit_version()) == "0.1.0");
    CHECK(derfkit_catalog_hash() != 0);
    CHECK(derfkit_catalog_hash() == derfkit_catalog_hash());
}

TEST_CASE("function list and handles") {
    char* listed = nullptr;
    REQUIRE(derfkit_funcs_list(&listed) == DERFKIT_OK);
    const json cat = json::parse(take(listed));
    REQUIRE(cat.is_array());
    CHECK(cat.size() == 25);
    CHECK(cat[0].at("name") == "erf");
    CHECK(cat[0].at("search_candidate") == true);
    CHECK(cat[0].at("declared").at("bounded") == true);

    derfkit_func_t* f = nullptr;
    REQUIRE(derfkit_func_open("erf", &f) == DERFKIT_OK);
    double v = 0.0, d = 0.0;
    REQUIRE(derfkit_func_eval_at(f, 1.0, &v, &d) == DERFKIT_OK);
    CHECK(std::abs(v - 0.8427007929497148) <= 1e-12);
    CHECK(std::abs(d - 2.0 / std::sqrt(3.14159265358979323846) * std::exp(-1.0)) <= 1e-12);

    char* info = nullptr;
    REQUIRE(derfkit_func_info(f, &info) == DERFKIT_OK);
    const json fi = json::parse(take(info));
    CHECK(fi.at("name") == "erf");
    CHECK(fi.at("formula") == "erf(x)");

    char* report = nullptr;
    REQUIRE(derfkit_func_classify(f, &report) == DERFKIT_OK);
    const json pr = json::parse(take(report));
    CHECK(pr.at("zero_centered") == true);
    CHECK(pr.at("bounded") == true);
    CHECK(pr.at("monotonic") == "increasing");
    CHECK(pr.at("growth_class") == "bounded");
    derfkit_func_close(f);

    derfkit_func_t* alias = nullptr;
    REQUIRE(derfkit_func_open("arctan", &alias) == DERFKIT_OK);
    char* ainfo = nullptr;
    REQUIRE(derfkit_func_info(alias, &ainfo) == DERFKIT_OK);
    CHECK(json::parse(take(ainfo)).at("name") == "arctan_scaled");
    derfkit_func_close(alias);
}

TEST_CASE("unknown names and null arguments produce status codes and messages") {
    derfkit_func_t* f = nullptr;
    CHECK(derfkit_func_open("erff", &f) == DERFKIT_ERR_NOT_FOUND);
    CHECK(f == nullptr);
    const std::string msg = derfkit_last_error();
    CHECK(msg.find("erff") != std::string::npos);
    CHECK(msg.find("erf") != std::string::npos);

    CHECK(derfkit_func_open(nullptr, &f) == DERFKIT_ERR_INVALID_ARGUMENT);
    CHECK(derfkit_func_open("erf", nullptr) == DERFKIT_ERR_INVALID_ARGUMENT);
    CHECK(derfkit_funcs_list(nullptr) == DERFKIT_ERR_INVALID_ARGUMENT);
    CHECK(derfkit_erf(0.5, nullptr) == DERFKIT_ERR_INVALID_ARGUMENT);
    CHECK(derfkit_func_eval_at(nullptr, 0.0, nullptr, nullptr) ==
          DERFKIT_ERR_INVALID_ARGUMENT);

    double out = 0.0;
    CHECK(derfkit_erf(1.0, &out) == DERFKIT_OK);
    CHECK(std::abs(out - 0.8427007929497148) <= 1e-12);
}

TEST_CASE("coefficient fit") {
    char* fit = nullptr;
    REQUIRE(derfkit_fit_eps(0.0, 0.0, &fit) == DERFKIT_OK);  // defaults
    const json r = json::parse(take(fit));
    CHECK(r.at("eps_star").get<double>() > 1.195);
    CHECK(r.at("eps_star").get<double>() < 1.215);
    CHECK(r.at("truncation_radius") == 8.0);
    CHECK(derfkit_fit_eps(5.0, 1e-6, &fit) == DERFKIT_ERR_PARAMETER);
}

TEST_CASE("dataset generate, open, info") {
    const std::string path = temp_path("ds");
    const json spec = {{"kind", "cluster_tokens"}, {"n", 64},      {"seq_len", 4},
                       {"c_in", 4},               {"n_classes", 2}, {"margin", 3.0},
                       {"seed", 3}};
    REQUIRE(derfkit_dataset_generate(spec.dump().c_str(), path.c_str()) == DERFKIT_OK);

    derfkit_dataset_t* d = nullptr;
    REQUIRE(derfkit_dataset_open(path.c_str(), &d) == DERFKIT_OK);
    char* info = nullptr;
    REQUIRE(derfkit_dataset_info(d, &info) == DERFKIT_OK);
    const json di = json::parse(take(info));
    CHECK(di.at("n") == 64);
    CHECK(di.at("train_count") == 48);
    CHECK(di.at("val_count") == 16);
    derfkit_dataset_close(d);

    CHECK(derfkit_dataset_open("/tmp/derfkit_capi_missing.dfk", &d) == DERFKIT_ERR_IO);
    CHECK(derfkit_dataset_generate("{not json", path.c_str()) == DERFKIT_ERR_CONFIG);
    CHECK(derfkit_dataset_generate(spec.dump().c_str(), "/no/such/dir/x.dfk") ==
          DERFKIT_ERR_IO);
    std::remove(path.c_str());
}

TEST_CASE("train, checkpoint, eval-mode loss") {
    const std::string ds_path = temp_path("train_ds");
    const std::string ckpt = temp_path("ckpt");

    json spec = tiny_train_spec();
    REQUIRE(derfkit_dataset_generate(spec.at("dataset").dump().c_str(), ds_path.c_str()) ==
            DERFKIT_OK);

    char* out = nullptr;
    REQUIRE(derfkit_train(spec.dump().c_str(), ckpt.c_str(), &out) == DERFKIT_OK);
    const json tr = json::parse(take(out));
    CHECK(tr.at("loss_curve").size() == 6);
    CHECK(tr.at("result").at("steps_completed") == 6);
    CHECK(tr.at("result").at("diverged") == false);
    CHECK(tr.at("wall_time").get<double>() > 0.0);

    char* out2 = nullptr;
    REQUIRE(derfkit_train(spec.dump().c_str(), nullptr, &out2) == DERFKIT_OK);
    const json tr2 = json::parse(take(out2));
    CHECK(tr2.at("loss_curve") == tr.at("loss_curve"));

    double loss = 0.0;
    REQUIRE(derfkit_eval_mode_train_loss(ckpt.c_str(), ds_path.c_str(), 32, 0, &loss) ==
            DERFKIT_OK);
    CHECK(std::abs(loss - tr.at("result").at("eval_mode_train_loss").get<double>()) <= 1e-15);

    CHECK(derfkit_eval_mode_train_loss("/tmp/derfkit_capi_nockpt", ds_path.c_str(), 32, 0,
                                       &loss) == DERFKIT_ERR_IO);
    CHECK(derfkit_train("{\"bad\": 1}", nullptr, &out) == DERFKIT_ERR_CONFIG);

    std::remove(ds_path.c_str());
    std::remove(ckpt.c_str());
}

TEST_CASE("experiments through the C surface") {
    json espec = {{"kind", "search"},
                  {"base", tiny_train_spec()},
                  {"functions", {"erf", "tanh"}},
                  {"repeats", 1}};

    char* rep = nullptr;
    REQUIRE(derfkit_experiment_run(espec.dump().c_str(), 2, &rep) == DERFKIT_OK);
    const std::string rep_text = take(rep);
    const json report = json::parse(rep_text);
    CHECK(report.at("experiment_kind") == "search");
    CHECK(report.at("trials").size() == 2);
    CHECK(report.at("ranking").size() == 2);
    CHECK(report.at("version") == std::string(derfkit_version()));
    CHECK(report.at("wall_time").get<double>() > 0.0);

    // Strip the timing key: everything else must be identical across runs.
    char* rep2 = nullptr;
    REQUIRE(derfkit_experiment_run(espec.dump().c_str(), 1, &rep2) == DERFKIT_OK);
    json a = report, b = json::parse(take(rep2));
    a.erase("wall_time");
    b.erase("wall_time");
    CHECK(a.dump() == b.dump());

    char* csv = nullptr;
    REQUIRE(derfkit_report_csv(rep_text.c_str(), &csv) == DERFKIT_OK);
    const std::string csv_text = take(csv);
    CHECK(csv_text.rfind("trial_id,function_name,", 0) == 0);
    CHECK(csv_text.find("erf/r0") != std::string::npos);

    CHECK(derfkit_experiment_run("{\"kind\":\"nope\"}", 1, &rep) == DERFKIT_ERR_CONFIG);
    CHECK(derfkit_report_csv("{}", &csv) == DERFKIT_ERR_CONFIG);
    CHECK(std::string(derfkit_last_error()).find("trials") != std::string::npos);
}

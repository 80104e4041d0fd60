#include <stdio.h>
#include <stdlib.h>
#include "unpack.h"

#define CHECK(call)                                                        \
    do {                                                                   \
        UnpackStatus st_ = (call);                                         \
        if (st_ != UNPACK_STATUS_OK) {                                     \
            fprintf(stderr, "%s -> %d: %s\n", #call, (int)st_,             \
                    unpack_last_error());                                  \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(void) {
    UnpackModel *model = NULL;
    UnpackConfig *config = NULL;
    UnpackLedger *ledger = NULL;
    UnpackModelInfo info;
    uint32_t ids[32];
    size_t n = 0, len = 0;
    double credit[32], total = 0.0;
    char *paths = NULL;

    CHECK(unpack_model_new_toy(2, 2, 7, &model));
    CHECK(unpack_model_info(model, &info));
    CHECK(unpack_tokenize(model, "Hello", 1, ids, 32, &n));
    CHECK(unpack_config_new("kqv_aligned", &config));
    CHECK(unpack_config_set_tau(config, 0.0, 0.0));
    CHECK(unpack_config_set_beta(config, 0.0));
    CHECK(unpack_trace(model, config, ids, n, n - 1, &ledger));
    CHECK(unpack_ledger_token_credit(ledger, credit, 32, &len));
    CHECK(unpack_ledger_paths_json(ledger, &paths));
    for (size_t i = 0; i < len; i++) total += credit[i];
    printf("%zu %zu %zu %.9e %.9e\n", info.n_components, n, len, total,
           unpack_ledger_total(ledger));

    if (unpack_config_new("nope", &config) != UNPACK_STATUS_INVALID_ARGUMENT) return 2;
    if (unpack_last_error() == NULL) return 3;

    unpack_string_free(paths);
    unpack_ledger_free(ledger);
    unpack_config_free(config);
    unpack_model_free(model);
    return 0;
}

/* Compiled with -fsyntax-only by the header test. */
#include <stdio.h>

#include "repinv.h"

int invert_one(const char *dir_tok, const char *lm_path, const char *adapter_path) {
    RepinvTokenizer *tok = NULL;
    RepinvLm *lm = NULL;
    RepinvInverter *inv = NULL;
    uint32_t ids[64];
    uint32_t out[64];
    float h[1024];
    size_t n_ids = 0, n_h = 0, n_out = 0;
    RepinvStatus s = repinv_tokenizer_load(dir_tok, &tok);
    if (s != REPINV_STATUS_OK) {
        fprintf(stderr, "%s\n", repinv_last_error());
        return (int)s;
    }
    repinv_tokenizer_encode(tok, "A short sentence.", ids, 64, &n_ids);
    repinv_lm_load(lm_path, &lm);
    repinv_lm_capture(lm, ids, n_ids, 1, h, 1024, &n_h);
    repinv_inverter_load(adapter_path, lm_path, NULL, tok, NULL, NULL, &inv);
    repinv_invert(inv, h, n_h, 16, out, 64, &n_out);
    double r1 = 0.0;
    repinv_rouge_n(ids, n_ids, out, n_out, 1, &r1);
    char *text = NULL;
    repinv_tokenizer_decode(tok, out, n_out, &text);
    printf("%s (ROUGE-1 %.2f)\n", text, r1);
    repinv_string_free(text);
    repinv_inverter_free(inv);
    repinv_lm_free(lm);
    repinv_tokenizer_free(tok);
    return 0;
}

//! The committed C header must stay in sync with the exported surface.
//! The build script regenerates it on every compile, so this fails when a
//! symbol is added or renamed without committing the new header.

use std::path::Path;

#[test]
fn generated_header_declares_the_full_surface() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("include")
        .join("polypseg.h");
    let text = std::fs::read_to_string(&header).unwrap();

    for decl in [
        "#ifndef POLYPSEG_H",
        "typedef enum PsgStatus",
        "PSG_STATUS_OK = 0",
        "PSG_STATUS_NULL_ARGUMENT = 1",
        "PSG_STATUS_INVALID_ARGUMENT = 2",
        "PSG_STATUS_IO_ERROR = 3",
        "PSG_STATUS_RUNTIME_ERROR = 4",
        "typedef struct PsgModel PsgModel",
        "const char *psg_version(void)",
        "const char *psg_last_error(void)",
        "enum PsgStatus psg_model_load(const char *path, struct PsgModel **out_model)",
        "void psg_model_free(struct PsgModel *model)",
        "enum PsgStatus psg_model_param_count(const struct PsgModel *model, uint64_t *out_count)",
        "enum PsgStatus psg_model_predict(const struct PsgModel *model,",
        "enum PsgStatus psg_model_gradcam(const struct PsgModel *model,",
        "enum PsgStatus psg_iou(const uint8_t *pred, const uint8_t *truth, uint32_t side, double *out_value)",
        "enum PsgStatus psg_dice(const uint8_t *pred,",
    ] {
        assert!(text.contains(decl), "header is missing `{decl}`");
    }

    // The model struct must stay opaque: no field list anywhere.
    assert!(!text.contains("struct PsgModel {"));
}

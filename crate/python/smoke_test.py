"""Quick end-to-end check of the Python bindings."""

import os
import tempfile

import rich_unet_py as ru


def main():
    data = ru.synth(4, size=16, seed=3)
    assert [d[0] for d in data] == ["synth_0000", "synth_0001", "synth_0002", "synth_0003"]
    images = [d[1] for d in data]
    masks = [d[2] for d in data]

    assert ru.dice(masks[0], masks[0]) == 1.0
    assert ru.iou(masks[0], masks[0]) == 1.0
    assert ru.hd95(masks[0], masks[0]) == 0.0
    d = ru.dice(masks[0], masks[1])
    assert abs(ru.iou(masks[0], masks[1]) - d / (2 - d)) < 1e-12
    try:
        ru.hd95([[0, 0], [0, 0]], [[1, 0], [0, 0]])
        raise AssertionError("hd95 of an empty mask should raise")
    except ValueError:
        pass

    pgm = b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64])
    assert ru.read_pgm(pgm) == [[0.0, 1.0], [128 / 255, 64 / 255]]
    assert ru.write_pgm(ru.read_pgm(pgm)) == pgm
    try:
        ru.read_pgm(b"P6\n2 2\n255\n\0\0\0\0")
        raise AssertionError("P6 should be rejected")
    except ValueError as e:
        assert "offset 0" in str(e)

    cfg = "image_size = 16\nstage_channels = 4,8,16\ntopk = 4\nbottleneck_channels = 8\nlearning_rate = 1e-3\n"
    trainer = ru.Trainer(cfg, seed=5)
    log = trainer.train(images, masks, 10)
    assert [s for s, _, _ in log] == list(range(1, 11))
    assert trainer.step == 10

    pred = trainer.predict(images[0])
    assert len(pred) == 16 and len(pred[0]) == 16
    mean_dice, mean_iou, _, csv = trainer.evaluate(images, masks)
    assert 0.0 <= mean_iou <= mean_dice <= 1.0
    assert csv.startswith("id,dice,iou,hd95,hd95_defined")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "state.bin")
        trainer.save(path)
        again = ru.Trainer.load(path)
        assert again.to_bytes() == trainer.to_bytes()
        assert again.train(images, masks, 12) == trainer.train(images, masks, 12)

    print("python smoke test ok:", trainer.num_params, "params, dice", round(mean_dice, 4))


if __name__ == "__main__":
    main()

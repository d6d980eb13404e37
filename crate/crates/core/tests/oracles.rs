mod support;

use btmtrack::backbone::ModalInputs;
use btmtrack::config::ModelConfig;
use btmtrack::gradcheck::check_param_gradients;
use btmtrack::head::{loss, BBox};
use btmtrack::image::Image;
use btmtrack::model::Model;
use btmtrack::nn::{patchify, Ctx, Init, ParamGroup, ParamStore};
use btmtrack::rng::{seeded, trunc_normal};
use btmtrack::tdtb::{Tdtb, TdtbInputs};
use btmtrack::tmce::keep_count;
use btmtrack::{Tape, Tensor};

use support::oracle::{corr, tdtb, top_k, M, P};
use support::{micro_config, random_inputs, scramble};

fn rand_m(r: usize, c: usize, seed: u64) -> M {
    let mut rng = seeded(seed);
    M {
        r,
        c,
        d: (0..r * c).map(|_| trunc_normal(&mut rng, 1.0)).collect(),
    }
}

fn tensor(m: &M) -> Tensor {
    Tensor::new([m.r, m.c], m.d.clone()).unwrap()
}

#[test]
fn tdtb_matches_straight_line_oracle() {
    let (nz, ns, c) = (2, 3, 8);
    let mut store = ParamStore::new();
    let mut rng = seeded(3);
    let mut init = Init {
        store: &mut store,
        rng: &mut rng,
        group: ParamGroup::Other,
    };
    let t = Tdtb::new(&mut init, "br", c, 2, 2, Default::default()).unwrap();
    scramble(&mut store, 4, 0.3);
    let inputs: Vec<M> = [(nz, 10), (nz, 11), (nz, 12), (nz, 13), (ns, 14), (ns, 15)]
        .iter()
        .map(|&(r, s)| rand_m(r, c, s))
        .collect();

    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let v: Vec<_> = inputs.iter().map(|m| tape.constant(tensor(m))).collect();
    let out = t
        .forward(
            &ctx,
            &TdtbInputs {
                z_rgb_static: v[0],
                z_rgb_dynamic: v[1],
                z_tir_static: v[2],
                z_tir_dynamic: v[3],
                x_rgb: v[4],
                x_tir: v[5],
            },
        )
        .unwrap();
    let r = tdtb(&P(&store), "br", 2, &inputs[0], &inputs[1], &inputs[2], &inputs[3], &inputs[4], &inputs[5]);

    let pairs = [
        (&r.z_rgb, out.z_rgb),
        (&r.z_tir, out.z_tir),
        (&r.x_rgb, out.x_rgb),
        (&r.x_tir, out.x_tir),
        (&r.z_m, out.bridge.z_m),
        (&r.z_m1, out.bridge.z_m1),
        (&r.z_m2, out.bridge.z_m2),
    ];
    for (i, (want, got)) in pairs.iter().enumerate() {
        let d = want.max_abs_diff(&got.value());
        assert!(d < 1e-10, "output {i} differs by {d}");
    }
    assert_eq!(tape.count_marks("mhca"), 6);
}

fn oracle_embed(p: &P<'_>, img: &Image, patch: usize, pos: &str) -> M {
    let mut patches = M::from_tensor(&patchify(img, patch).unwrap());
    patches.d.iter_mut().for_each(|v| *v = (*v - 0.5) / 0.25);
    let mut x = p.linear("embed.proj", &patches);
    let pos = p.get(pos);
    x.d.iter_mut().zip(&pos.d).for_each(|(a, b)| *a += b);
    x
}

/// Backbone of [`micro_config`] written out by hand: embed, block 1,
/// prune, bridge, block 2, final norm, zero-filled grid.
fn oracle_backbone(model: &Model, rgb: &[Image; 3], tir: &[Image; 3]) -> (M, M, Vec<usize>) {
    let cfg = &model.cfg;
    let p = P(&model.params);
    let embed = |x: &[Image; 3]| {
        let zs = oracle_embed(&p, &x[0], cfg.patch_size, "embed.pos_template");
        let zd = oracle_embed(&p, &x[1], cfg.patch_size, "embed.pos_template");
        let s = oracle_embed(&p, &x[2], cfg.patch_size, "embed.pos_search");
        M::vstack(&[&zs, &zd, &s])
    };
    let (nz, nx) = (cfg.template_tokens(), cfg.search_tokens());
    let (r, rmaps) = p.block("rgb.block1", cfg.heads, &embed(rgb));
    let (t, tmaps) = p.block("tir.block1", cfg.heads, &embed(tir));

    let s0 = 2 * nz;
    let (rs, rd) = (corr(&rmaps, 0..nz, s0, nx), corr(&rmaps, nz..2 * nz, s0, nx));
    let (ts, td) = (corr(&tmaps, 0..nz, s0, nx), corr(&tmaps, nz..2 * nz, s0, nx));
    let score: Vec<f64> = (0..nx).map(|j| (rs[j] + rd[j]).max(ts[j] + td[j])).collect();
    let keep = top_k(&score, keep_count(nx, cfg.keep_ratio));
    let rows: Vec<usize> = (0..s0).chain(keep.iter().map(|k| s0 + k)).collect();
    let (r, t) = (r.rows(&rows), t.rows(&rows));

    let seg = |m: &M, a: usize, n: usize| m.rows(&(a..a + n).collect::<Vec<_>>());
    let k = keep.len();
    let b = tdtb(
        &p,
        "tdtb1",
        cfg.heads,
        &seg(&r, 0, nz),
        &seg(&r, nz, nz),
        &seg(&t, 0, nz),
        &seg(&t, nz, nz),
        &seg(&r, s0, k),
        &seg(&t, s0, k),
    );
    let r = M::vstack(&[&b.z_rgb, &b.x_rgb]);
    let t = M::vstack(&[&b.z_tir, &b.x_tir]);
    let (r, _) = p.block("rgb.block2", cfg.heads, &r);
    let (t, _) = p.block("tir.block2", cfg.heads, &t);

    let grid = |m: &M, norm: &str| {
        let x = p.norm(norm, &seg(m, s0, k));
        let mut out = M { r: nx, c: cfg.dim, d: vec![0.0; nx * cfg.dim] };
        for (i, &cell) in keep.iter().enumerate() {
            out.d[cell * cfg.dim..(cell + 1) * cfg.dim].copy_from_slice(x.row(i));
        }
        out
    };
    (grid(&r, "rgb.norm"), grid(&t, "tir.norm"), keep)
}

#[test]
fn backbone_matches_hand_written_micro_model() {
    for seed in 0..4 {
        let cfg = ModelConfig { seed, ..micro_config(8) };
        let mut model = Model::new(&cfg).unwrap();
        scramble(&mut model.params, 100 + seed, 0.3);
        let (rgb, tir) = random_inputs(&cfg, 20 + seed);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &model.params);
        let out = model
            .backbone
            .forward(&ctx, &ModalInputs::from_triple(&rgb), &ModalInputs::from_triple(&tir))
            .unwrap();
        let (fr, ft, keep) = oracle_backbone(&model, &rgb, &tir);
        assert_eq!(out.spatial_index, keep);
        assert!(fr.max_abs_diff(&out.feat_rgb.value()) < 1e-10);
        assert!(ft.max_abs_diff(&out.feat_tir.value()) < 1e-10);
        assert_eq!(tape.count_marks("attn"), 4);
        assert_eq!(tape.count_marks("mhca"), 6);
    }
}

#[test]
fn micro_model_gradients_match_finite_differences() {
    let cfg = micro_config(16);
    let mut model = Model::new(&cfg).unwrap();
    scramble(&mut model.params, 7, 0.2);
    let (rgb, tir) = random_inputs(&cfg, 40);
    let target = BBox::new(0.6, 0.4, 0.3, 0.45);
    let wts = model.loss_weights();
    let m = model.clone();
    let report = check_param_gradients(&model.params, 1e-5, Some(6), |ctx| {
        let out = m.forward(ctx, &ModalInputs::from_triple(&rgb), &ModalInputs::from_triple(&tir))?;
        Ok(loss(&out.head, &target, &wts)?.total)
    })
    .unwrap();
    assert!(report.checked > 300, "{report:?}");
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

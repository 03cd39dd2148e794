/** DOM wiring: builds controls from /api/meta and drives the sync loop. */

import { Client } from "./api.js";
import { SyncLoop } from "./sync.js";
import {
    axisAngleToQuat,
    clampCamera,
    EXPRESSION_SLIDER_BOUND,
    initialState,
    JOINT_ANGLE_BOUND,
    resetControls,
    SHAPE_SLIDER_BOUND,
    type Meta,
    type ViewerState,
} from "./types.js";

const POSE_PRESETS = ["a", "t", "y", "stride"];

function el<K extends keyof HTMLElementTagNameMap>(
    tag: K,
    attrs: Record<string, string> = {},
    text = "",
): HTMLElementTagNameMap[K] {
    const node = document.createElement(tag);
    for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
    if (text) node.textContent = text;
    return node;
}

/** Labeled range input; label and input are linked for screen readers. */
function slider(
    id: string,
    label: string,
    min: number,
    max: number,
    step: number,
    value: number,
    oninput: (v: number) => void,
): HTMLElement {
    const wrap = el("div", { class: "control" });
    const lab = el("label", { for: id }, label);
    const input = el("input", {
        id,
        type: "range",
        min: String(min),
        max: String(max),
        step: String(step),
        value: String(value),
    });
    const out = el("output", { for: id }, value.toFixed(2));
    input.addEventListener("input", () => {
        const v = input.valueAsNumber;
        out.textContent = v.toFixed(2);
        oninput(v);
    });
    wrap.append(lab, input, out);
    return wrap;
}

function setSlider(id: string, v: number): void {
    const input = document.getElementById(id) as HTMLInputElement | null;
    if (!input) return;
    input.value = String(v);
    const out = input.nextElementSibling as HTMLOutputElement | null;
    if (out) out.textContent = v.toFixed(2);
}

class Viewer {
    state: ViewerState;
    loop: SyncLoop;
    img: HTMLImageElement;
    banner: HTMLElement;
    status: HTMLElement;
    lastUrl = "";
    skeleton = false;

    constructor(readonly client: Client, readonly meta: Meta) {
        this.state = initialState(meta);
        this.img = document.getElementById("frame") as HTMLImageElement;
        this.banner = document.getElementById("banner")!;
        this.status = document.getElementById("status")!;
        this.loop = new SyncLoop(
            {
                mutate: (m) => client.mutate(m),
                frame: (cam) => client.frame(cam, this.skeleton),
            },
            {
                onFrame: (f) => this.showFrame(f.version, f.blob),
                onError: (msg) => this.showBanner(msg),
                onRecovered: () => this.hideBanner(),
            },
            this.state.camera,
        );
        this.buildControls();
        this.bindCamera();
        this.loop.start();
    }

    showFrame(version: number, blob: Blob): void {
        const url = URL.createObjectURL(blob);
        if (this.lastUrl) URL.revokeObjectURL(this.lastUrl);
        this.lastUrl = url;
        this.img.src = url;
        this.state.frameVersion = version;
        const c = this.state.camera;
        this.status.textContent =
            `v${version} · az ${c.az.toFixed(0)}° el ${c.el.toFixed(0)}° ` +
            `r ${c.r.toFixed(2)} · ${this.meta.counts.total} members`;
    }

    showBanner(msg: string): void {
        this.banner.textContent = `service unreachable: ${msg} (retrying)`;
        this.banner.classList.remove("hidden");
    }

    hideBanner(): void {
        this.banner.classList.add("hidden");
    }

    buildControls(): void {
        const shape = document.getElementById("shape-controls")!;
        for (let i = 0; i < this.meta.n_basis; i++) {
            shape.append(
                slider(`shape-${i}`, `basis ${i}`, -SHAPE_SLIDER_BOUND,
                    SHAPE_SLIDER_BOUND, 0.01, 0, (v) => {
                        this.state.shapeSliders[i] = v;
                        this.loop.queueMutation({
                            kind: "shape",
                            delta: [...this.state.shapeSliders],
                        });
                    }),
            );
        }

        const expr = document.getElementById("expression-controls")!;
        for (let i = 0; i < this.meta.n_expression; i++) {
            expr.append(
                slider(`expr-${i}`, `expression ${i}`,
                    -EXPRESSION_SLIDER_BOUND, EXPRESSION_SLIDER_BOUND, 0.01,
                    0, (v) => {
                        this.state.expressionSliders[i] = v;
                        this.loop.queueMutation({
                            kind: "pose",
                            body: {
                                expression: [...this.state.expressionSliders],
                            },
                        });
                    }),
            );
        }

        const pose = document.getElementById("pose-controls")!;
        const presetSel = el("select", { id: "preset" });
        presetSel.append(el("option", { value: "" }, "(keep pose)"));
        for (const p of POSE_PRESETS)
            presetSel.append(el("option", { value: p }, p));
        presetSel.addEventListener("change", () => {
            if (!presetSel.value) return;
            this.loop.queueMutation({
                kind: "pose",
                body: { preset: presetSel.value },
            });
        });
        const presetWrap = el("div", { class: "control" });
        const presetLab = el("label", { for: "preset" }, "preset");
        presetWrap.append(presetLab, presetSel);
        pose.append(presetWrap);

        const jointSel = el("select", { id: "joint" });
        for (const name of this.meta.joint_names)
            jointSel.append(el("option", { value: name }, name));
        jointSel.addEventListener("change", () => {
            this.state.selectedJoint = jointSel.value;
            this.state.jointAngles = [0, 0, 0];
            for (const a of ["x", "y", "z"]) setSlider(`joint-${a}`, 0);
        });
        const jointWrap = el("div", { class: "control" });
        const jointLab = el("label", { for: "joint" }, "joint");
        jointWrap.append(jointLab, jointSel);
        pose.append(jointWrap);

        (["x", "y", "z"] as const).forEach((axis, k) => {
            pose.append(
                slider(`joint-${axis}`, `rotate ${axis}`, -JOINT_ANGLE_BOUND,
                    JOINT_ANGLE_BOUND, 0.01, 0, (v) => {
                        this.state.jointAngles[k] = v;
                        this.postJoint();
                    }),
            );
        });

        (document.getElementById("reset") as HTMLButtonElement)
            .addEventListener("click", () => this.reset());
        const skel = document.getElementById("skeleton") as HTMLInputElement;
        skel.addEventListener("change", () => {
            this.skeleton = skel.checked;
            this.loop.setCamera(this.state.camera);
        });
    }

    postJoint(): void {
        if (!this.state.selectedJoint) return;
        this.loop.queueMutation({
            kind: "pose",
            body: {
                joints: {
                    [this.state.selectedJoint]:
                        axisAngleToQuat(this.state.jointAngles),
                },
            },
        });
    }

    reset(): void {
        this.state = resetControls(this.state);
        for (let i = 0; i < this.meta.n_basis; i++) setSlider(`shape-${i}`, 0);
        for (let i = 0; i < this.meta.n_expression; i++)
            setSlider(`expr-${i}`, 0);
        for (const a of ["x", "y", "z"]) setSlider(`joint-${a}`, 0);
        const presetSel = document.getElementById("preset") as HTMLSelectElement;
        presetSel.value = "";
        this.loop.queueMutation({ kind: "reset" });
    }

    bindCamera(): void {
        const cam = this.state.camera;
        const apply = () => {
            this.state.camera = clampCamera({ ...this.state.camera });
            const c = this.state.camera;
            setSlider("cam-az", c.az);
            setSlider("cam-el", c.el);
            setSlider("cam-r", c.r);
            setSlider("cam-fov", c.fov);
            this.loop.setCamera(c);
        };

        const camBox = document.getElementById("camera-controls")!;
        camBox.append(
            slider("cam-az", "azimuth", 0, 360, 1, cam.az, (v) => {
                this.state.camera.az = v;
                apply();
            }),
            slider("cam-el", "elevation", 1, 179, 1, cam.el, (v) => {
                this.state.camera.el = v;
                apply();
            }),
            slider("cam-r", "radius", 0.5, 6, 0.05, cam.r, (v) => {
                this.state.camera.r = v;
                apply();
            }),
            slider("cam-fov", "fov", 20, 120, 1, cam.fov, (v) => {
                this.state.camera.fov = v;
                apply();
            }),
        );

        // drag to orbit; arrow keys work too since the image is focusable
        let dragging = false;
        let last: [number, number] = [0, 0];
        this.img.addEventListener("pointerdown", (e) => {
            dragging = true;
            last = [e.clientX, e.clientY];
            this.img.setPointerCapture(e.pointerId);
        });
        this.img.addEventListener("pointermove", (e) => {
            if (!dragging) return;
            this.state.camera.az -= (e.clientX - last[0]) * 0.5;
            this.state.camera.el -= (e.clientY - last[1]) * 0.5;
            last = [e.clientX, e.clientY];
            apply();
        });
        this.img.addEventListener("pointerup", () => (dragging = false));
        this.img.addEventListener("keydown", (e) => {
            const step = e.shiftKey ? 15 : 5;
            if (e.key === "ArrowLeft") this.state.camera.az -= step;
            else if (e.key === "ArrowRight") this.state.camera.az += step;
            else if (e.key === "ArrowUp") this.state.camera.el -= step;
            else if (e.key === "ArrowDown") this.state.camera.el += step;
            else if (e.key === "+" || e.key === "=") this.state.camera.r -= 0.1;
            else if (e.key === "-") this.state.camera.r += 0.1;
            else return;
            e.preventDefault();
            apply();
        });
    }
}

async function boot(): Promise<void> {
    const client = new Client("");
    const banner = document.getElementById("banner")!;
    try {
        const meta = await client.meta();
        new Viewer(client, meta);
    } catch (err) {
        banner.textContent =
            `service unreachable: ${err instanceof Error ? err.message : err}` +
            " (reload once the session is up)";
        banner.classList.remove("hidden");
        setTimeout(boot, 2000);
    }
}

window.addEventListener("DOMContentLoaded", () => {
    void boot();
});

/** DOM wiring: sliders per dimension, effect panel, frame display, error banner. */

import { ApiClient } from "./api.js";
import { ViewerController } from "./state.js";

function el<K extends keyof HTMLElementTagNameMap>(
    tag: K,
    attrs: Record<string, string> = {},
    text = "",
): HTMLElementTagNameMap[K] {
    const node = document.createElement(tag);
    for (const [key, value] of Object.entries(attrs)) {
        node.setAttribute(key, value);
    }
    if (text) {
        node.textContent = text;
    }
    return node;
}

export async function startViewer(root: HTMLElement, serverUrl: string): Promise<ViewerController> {
    const banner = el("div", { class: "banner", style: "display:none" });
    const image = el("img", { class: "frame", alt: "rendered frame" });
    const sliders = el("div", { class: "sliders" });
    const effectPanel = el("div", { class: "effect" });
    root.append(banner, image, sliders, effectPanel);

    let lastObjectUrl: string | null = null;
    const controller = new ViewerController(new ApiClient(serverUrl), {
        onFrame: (frame) => {
            const objectUrl = URL.createObjectURL(frame.blob);
            image.src = objectUrl;
            if (lastObjectUrl) {
                URL.revokeObjectURL(lastObjectUrl);
            }
            lastObjectUrl = objectUrl;
        },
        onError: (message) => {
            banner.textContent = message;
            banner.style.display = "block";
        },
    });

    let meta;
    try {
        meta = await controller.init();
    } catch {
        return controller; // banner already shown; leave the page alive
    }

    meta.dims.forEach((dim, index) => {
        const row = el("div", { class: "slider-row" });
        const label = el("label", {}, `${dim.name} (${dim.kind})`);
        const value = el("span", { class: "value" }, "0.50");
        const input = el("input", {
            type: "range",
            min: "0",
            max: "1",
            step: "0.001",
            value: "0.5",
        });
        input.addEventListener("input", () => {
            const v = Number(input.value);
            controller.setCoordinate(index, v);
            value.textContent = v.toFixed(2);
        });
        row.append(label, input, value);
        sliders.append(row);
    });

    const title = el("h3", {}, "Effect (shutter / aperture)");
    const enable = el("input", { type: "checkbox", id: "fx-on" });
    const enableLabel = el("label", { for: "fx-on" }, "enabled");
    const axis = el("select", { id: "fx-axis" });
    meta.dims.forEach((dim, index) => {
        axis.append(el("option", { value: String(index) }, dim.name));
    });
    const radius = el("input", { type: "range", min: "0", max: "0.5", step: "0.01", value: "0" });
    const radiusLabel = el("span", { class: "value" }, "0.00");
    const samples = el("input", { type: "number", min: "1", max: "64", value: "8" });
    effectPanel.append(title, enable, enableLabel, el("label", {}, "axis"), axis,
        el("label", {}, "radius"), radius, radiusLabel,
        el("label", {}, "samples"), samples);

    const pushEffect = () => {
        radiusLabel.textContent = Number(radius.value).toFixed(2);
        controller.setEffect({
            enabled: enable.checked,
            axis: Number(axis.value),
            radius: Number(radius.value),
            n: Number(samples.value),
        });
    };
    enable.addEventListener("change", pushEffect);
    axis.addEventListener("change", pushEffect);
    radius.addEventListener("input", pushEffect);
    samples.addEventListener("change", pushEffect);

    return controller;
}

declare global {
    interface Window {
        xfieldViewer?: Promise<ViewerController>;
    }
}

if (typeof document !== "undefined" && document.getElementById("viewer-root")) {
    window.xfieldViewer = startViewer(
        document.getElementById("viewer-root") as HTMLElement,
        window.location.origin,
    );
}

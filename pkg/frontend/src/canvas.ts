// Paints a shape list onto a 2D canvas context. Deliberately dumb: all
// decisions happen in scene.ts.

import type { Shape } from "./scene.js";

export function paint(ctx: CanvasRenderingContext2D, width: number, height: number, shapes: Shape[]): void {
  ctx.clearRect(0, 0, width, height);
  for (const shape of shapes) {
    switch (shape.kind) {
      case "rect":
        ctx.fillStyle = shape.fill;
        ctx.fillRect(shape.x, shape.y, shape.w, shape.h);
        if (shape.stroke) {
          ctx.strokeStyle = shape.stroke;
          ctx.lineWidth = shape.stroke ? 1.5 : 1;
          ctx.strokeRect(shape.x, shape.y, shape.w, shape.h);
        }
        break;
      case "circle":
        ctx.fillStyle = shape.fill;
        ctx.beginPath();
        ctx.arc(shape.x, shape.y, shape.r, 0, Math.PI * 2);
        ctx.fill();
        break;
      case "line":
        ctx.strokeStyle = shape.color;
        ctx.lineWidth = shape.width;
        ctx.beginPath();
        ctx.moveTo(shape.x1, shape.y1);
        ctx.lineTo(shape.x2, shape.y2);
        ctx.stroke();
        break;
      case "text":
        ctx.fillStyle = shape.color;
        ctx.font = `bold ${shape.size}px sans-serif`;
        ctx.textAlign = "center";
        ctx.fillText(shape.text, shape.x, shape.y);
        break;
    }
  }
}

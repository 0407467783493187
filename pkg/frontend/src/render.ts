// WebGL2 renderer: a fullscreen triangle whose fragment shader runs the
// inverse equirectangular projection (the same math as projection.ts).

import type { ViewState } from "./state.js";
import { wrapYaw } from "./state.js";

const VERTEX_SRC = `#version 300 es
const vec2 verts[3] = vec2[3](vec2(-1.0, -1.0), vec2(3.0, -1.0), vec2(-1.0, 3.0));
out vec2 screen;
void main() {
  screen = verts[gl_VertexID];
  gl_Position = vec4(verts[gl_VertexID], 0.0, 1.0);
}`;

const FRAGMENT_SRC = `#version 300 es
precision highp float;
uniform sampler2D pano;
uniform float yawRad;
uniform float pitchRad;
uniform float halfTan;
uniform float aspect;
in vec2 screen;
out vec4 color;
#define PI 3.141592653589793
void main() {
  float cx = screen.x * halfTan * aspect;
  float cy = screen.y * halfTan;
  float cosYaw = cos(yawRad), sinYaw = sin(yawRad);
  float cosP = cos(pitchRad), sinP = sin(pitchRad);
  float y1 = cy * cosP + sinP;
  float z1 = -cy * sinP + cosP;
  vec3 dir = normalize(vec3(cx * cosYaw + z1 * sinYaw, y1, -cx * sinYaw + z1 * cosYaw));
  float u = fract(atan(dir.x, dir.z) / (2.0 * PI));
  float v = 0.5 - asin(clamp(dir.y, -1.0, 1.0)) / PI;
  color = texture(pano, vec2(u, v));
}`;

function compile(gl: WebGL2RenderingContext, type: number, src: string): WebGLShader {
  const shader = gl.createShader(type)!;
  gl.shaderSource(shader, src);
  gl.compileShader(shader);
  if (!gl.getShaderParameter(shader, gl.COMPILE_STATUS)) {
    throw new Error(`shader compile failed: ${gl.getShaderInfoLog(shader)}`);
  }
  return shader;
}

export class Renderer {
  private gl: WebGL2RenderingContext;
  private program: WebGLProgram;
  private uniforms: { yaw: WebGLUniformLocation; pitch: WebGLUniformLocation; halfTan: WebGLUniformLocation; aspect: WebGLUniformLocation };

  constructor(private canvas: HTMLCanvasElement) {
    const gl = canvas.getContext("webgl2");
    if (!gl) throw new Error("WebGL2 unavailable");
    this.gl = gl;
    const program = gl.createProgram()!;
    gl.attachShader(program, compile(gl, gl.VERTEX_SHADER, VERTEX_SRC));
    gl.attachShader(program, compile(gl, gl.FRAGMENT_SHADER, FRAGMENT_SRC));
    gl.linkProgram(program);
    if (!gl.getProgramParameter(program, gl.LINK_STATUS)) {
      throw new Error(`program link failed: ${gl.getProgramInfoLog(program)}`);
    }
    this.program = program;
    this.uniforms = {
      yaw: gl.getUniformLocation(program, "yawRad")!,
      pitch: gl.getUniformLocation(program, "pitchRad")!,
      halfTan: gl.getUniformLocation(program, "halfTan")!,
      aspect: gl.getUniformLocation(program, "aspect")!,
    };
    gl.useProgram(program);
    gl.uniform1i(gl.getUniformLocation(program, "pano"), 0);
  }

  setTexture(image: TexImageSource) {
    const gl = this.gl;
    const tex = gl.createTexture();
    gl.activeTexture(gl.TEXTURE0);
    gl.bindTexture(gl.TEXTURE_2D, tex);
    gl.pixelStorei(gl.UNPACK_FLIP_Y_WEBGL, false);
    gl.texImage2D(gl.TEXTURE_2D, 0, gl.RGBA, gl.RGBA, gl.UNSIGNED_BYTE, image);
    // wrap horizontally (the panorama guarantees column 0 == column W-1),
    // clamp vertically
    gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_WRAP_S, gl.REPEAT);
    gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_WRAP_T, gl.CLAMP_TO_EDGE);
    gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_MIN_FILTER, gl.LINEAR);
    gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_MAG_FILTER, gl.LINEAR);
  }

  draw(state: ViewState) {
    const gl = this.gl;
    const w = this.canvas.clientWidth || this.canvas.width;
    const h = this.canvas.clientHeight || this.canvas.height;
    if (this.canvas.width !== w || this.canvas.height !== h) {
      this.canvas.width = w;
      this.canvas.height = h;
    }
    gl.viewport(0, 0, w, h);
    gl.useProgram(this.program);
    const DEG = Math.PI / 180;
    gl.uniform1f(this.uniforms.yaw, wrapYaw(state.yaw) * DEG);
    gl.uniform1f(this.uniforms.pitch, state.pitch * DEG);
    gl.uniform1f(this.uniforms.halfTan, Math.tan((state.fov / 2) * DEG));
    gl.uniform1f(this.uniforms.aspect, w / h);
    gl.drawArrays(gl.TRIANGLES, 0, 3);
  }
}

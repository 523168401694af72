int shared_buf[64];
double weights[3];
char flag;
int use(void) { return shared_buf[0] + (int)weights[1] + flag; }
